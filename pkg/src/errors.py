"""
Exception hierarchy shared by the library and the command-line interface.
"""


class QuantMergeError(Exception):
    """Base class for all errors raised by quantmerge."""


class DataError(QuantMergeError, ValueError):
    """Input data violates a documented format or invariant."""


class UndefinedSkillError(QuantMergeError, ValueError):
    """Skill score requested against a reference score of zero."""


class InvariantError(QuantMergeError, RuntimeError):
    """An internal contract was broken."""


class UsageError(QuantMergeError):
    """Command-line arguments are inconsistent."""
