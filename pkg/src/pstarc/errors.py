"""Exception hierarchy shared by every layer of the package."""


class PstarcError(Exception):
    """Base class; ``kind`` is what the CLI writes into its error JSON."""

    kind = "error"


class DimensionError(PstarcError, ValueError):
    kind = "dimension"


class NumericError(PstarcError, ArithmeticError):
    kind = "numeric"


class ContractError(PstarcError, ValueError):
    kind = "contract"


class ConfigError(PstarcError, ValueError):
    kind = "config"


class ParseError(PstarcError, ValueError):
    kind = "parse"


class BankDeficiencyError(PstarcError):
    kind = "bank_deficiency"

    def __init__(self, message, deficient=None):
        super().__init__(message)
        self.deficient = dict(deficient or {})
