"""Exception hierarchy.

Every error carries a short ``category`` string so the command line can
print a single machine-parsable line on failure.
"""


class HtsrError(Exception):
    category = "error"


class ContractViolation(HtsrError, ValueError):
    category = "contract-violation"


class NotPositiveDefiniteError(HtsrError, ValueError):
    category = "not-positive-definite"


class SingularPushforwardError(NotPositiveDefiniteError):
    category = "singular-pushforward"


class IncoherentForecastsError(HtsrError, ValueError):
    category = "incoherent-forecasts"

    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class ZeroDensityError(HtsrError, ValueError):
    category = "zero-pushforward-density"


class OracleFailureError(HtsrError, RuntimeError):
    category = "oracle-failure"


class FitFailureError(HtsrError, RuntimeError):
    category = "fit-failure"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class ConfigError(HtsrError, ValueError):
    category = "config"


class DataError(HtsrError, ValueError):
    category = "data"
