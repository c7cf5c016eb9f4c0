"""Exception hierarchy.  Each class carries a short ``category`` string that
the CLI prints on stderr so callers can branch on failure kind."""


class Match2Error(Exception):
    category = "error"


class DimensionError(Match2Error, ValueError):
    category = "dimension"


class ContractError(Match2Error, ValueError):
    category = "contract"


class ConfigError(Match2Error, ValueError):
    category = "config"


class IngestionError(Match2Error, ValueError):
    category = "ingestion"


class DegenerateInputError(Match2Error, ValueError):
    category = "degenerate-input"


class AnswerLookupError(Match2Error, KeyError):
    category = "lookup"

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class NumericalError(Match2Error, FloatingPointError):
    category = "numerical"


class SamplingUnavailable(Match2Error):
    category = "sampling-unavailable"
