"""
Command-line entry point for the quantile merging pipeline.

Usage: python app.py <subcommand> [options]
"""

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
