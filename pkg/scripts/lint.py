import subprocess
import sys
from pathlib import Path

TARGETS = ["src", "scripts", "tests", "app.py"]


def run_tool(label: str, command: list, root_dir: Path) -> None:
    """Run one tool over the source tree and exit on failure."""
    result = subprocess.run(
        command + [str(root_dir / target) for target in TARGETS],
        capture_output=True,
        text=True,
    )

    if result.returncode != 0:
        print(f"❌ {label} failed with error:\n{result.stderr or result.stdout}")
        sys.exit(result.returncode)

    if result.stdout:
        print(f"✅ {label} output:\n{result.stdout}")
    else:
        print(f"✅ {label} completed successfully!")


def main():
    print("🔍 Running linting tools...")

    # Get the project root directory
    root_dir = Path(__file__).resolve().parent.parent

    print("\n🔄 Running isort to sort imports...")
    run_tool("isort", ["isort"], root_dir)

    print("\n🔤 Running black to format code...")
    run_tool("black", ["black"], root_dir)

    print("\n🧹 Running flake8 for style errors...")
    flake8 = ["flake8", "--max-line-length", "88", "--extend-ignore", "E203"]
    run_tool("flake8", flake8, root_dir)

    print("\n✨ All linting completed successfully! ✨")
    return 0


if __name__ == "__main__":
    sys.exit(main())
