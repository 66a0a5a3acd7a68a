"""Exception types shared across the package.

Every error carries a short machine-parsable ``code`` so the CLI can report
failures on a single line.
"""


class RopeError(Exception):
    code = "rope_error"


class DegenerateLink(RopeError):
    code = "degenerate_link"


class NonFinite(RopeError):
    code = "non_finite"


class DimensionMismatch(RopeError, ValueError):
    code = "dimension_mismatch"


class UnregisteredPrimitive(RopeError):
    code = "unregistered_primitive"


class Diverged(RopeError):
    code = "diverged"


class KindMismatch(RopeError, ValueError):
    code = "kind_mismatch"


class EmptyInput(RopeError, ValueError):
    code = "empty_input"


class InsufficientPoints(RopeError, ValueError):
    code = "insufficient_points"


class NonMonotonicTime(RopeError, ValueError):
    code = "non_monotonic_time"


class IndexOutOfRange(RopeError, IndexError):
    code = "index_out_of_range"


class HiddenParameterAccess(RopeError, PermissionError):
    code = "hidden_parameter_access"


class ConfigError(RopeError, ValueError):
    code = "bad_config"
