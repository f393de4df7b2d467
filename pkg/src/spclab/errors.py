"""Exception hierarchy. Every error carries a short machine-readable ``code``."""


class SpcLabError(Exception):
    code = "error"


class InvalidParameterError(SpcLabError, ValueError):
    code = "invalid_parameter"


class InvalidInputError(SpcLabError, ValueError):
    code = "invalid_input"


class OutOfRangeError(SpcLabError, ValueError):
    code = "out_of_range"


class PreconditionError(SpcLabError):
    code = "precondition"


class ConditioningError(SpcLabError, ArithmeticError):
    code = "conditioning"


class NumericError(SpcLabError, ArithmeticError):
    code = "numeric"


class UnsupportedCaseError(SpcLabError):
    code = "unsupported_case"


class HypothesisViolationError(SpcLabError):
    code = "hypothesis_violation"


class BalanceError(SpcLabError):
    code = "balance_failure"


class ConfigError(SpcLabError, ValueError):
    code = "invalid_config"
