"""Exception hierarchy shared by every subsystem.

The CLI maps these onto process exit codes (see ``oskt.cli``), so raising
the right class is part of the public contract, not just diagnostics.
"""


class OsktError(Exception):
    """Base class for all package-specific failures."""


class ContractError(OsktError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(OsktError):
    """An experiment configuration failed validation."""


class NumericError(OsktError):
    """A computation produced non-finite values or diverged."""


class FormatError(OsktError):
    """A container file is malformed, truncated, or of the wrong version."""
