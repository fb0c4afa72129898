"""Exception hierarchy shared across the toolkit.

Every error raised on a documented failure path derives from MadkitError so
the command line layer can map categories onto exit codes without guessing.
"""


class MadkitError(Exception):
    """Base class for all toolkit errors."""

    category = "error"


class ShapeError(MadkitError):
    """Operand shapes are incompatible; the message names both shapes."""

    category = "shape"


class ParameterError(MadkitError):
    """A numeric or structural argument is outside its documented domain."""

    category = "parameter"


class ConfigError(MadkitError):
    """A configuration value or combination of values is invalid."""

    category = "config"


class StateError(MadkitError):
    """An operation was applied to an object in the wrong state."""

    category = "state"


class ContractError(MadkitError):
    """An internal pre- or post-condition was violated by the caller."""

    category = "contract"


class FormatError(MadkitError):
    """A file (checkpoint, manifest, score or label file) is malformed."""

    category = "format"


class DataError(MadkitError):
    """Dataset contents cannot support the requested operation."""

    category = "data"


class NumericError(MadkitError):
    """A computation produced a non-finite value it cannot recover from."""

    category = "numeric"
