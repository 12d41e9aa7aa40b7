"""Exception types.

Every error carries a short upper-case ``code`` so callers (and the CLI) can
branch on the failure kind without parsing messages.
"""


class MnarselError(Exception):
    code = "ERROR"

    def __init__(self, message="", code=None):
        if code is not None:
            self.code = code
        super().__init__(f"{self.code}: {message}" if message else self.code)


class PartitionError(MnarselError, ValueError):
    """Invalid variable-role partition (OVERLAP, INCOMPLETE, R_NOT_IN_S, ...)."""


class DataError(MnarselError, ValueError):
    """Malformed input data (PARSE, RAGGED, ALL_MISSING_ROW, ...)."""


class NotSPDError(MnarselError, ValueError):
    code = "NOT_SPD"


class EmptyComponentError(MnarselError, RuntimeError):
    code = "EMPTY_COMPONENT"


class DegenerateFitError(MnarselError, RuntimeError):
    code = "ALL_STARTS_DEGENERATE"


class ConvergenceError(MnarselError, RuntimeError):
    code = "NO_CONVERGENCE"


class RankDeficientError(MnarselError, ValueError):
    code = "RANK_DEFICIENT"


class SelectionError(MnarselError, RuntimeError):
    """EMPTY_S or NO_VALID_MODEL raised by the role-selection stage."""


class ConfigError(MnarselError, ValueError):
    code = "CONFIG_PARSE"
