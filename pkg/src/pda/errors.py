"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented status codes without a lookup table.
"""


class PDAError(Exception):
    exit_code = 2


class DimensionError(PDAError, ValueError):
    pass


class ParameterError(PDAError, ValueError):
    exit_code = 1


class ContractError(PDAError, ValueError):
    pass


class DegenerateInputError(PDAError, ValueError):
    exit_code = 3


class DataError(PDAError, ValueError):
    pass


class FormatError(DataError):
    pass


class BankConstructionError(DataError):
    def __init__(self, empty_classes, domain=None):
        self.empty_classes = list(empty_classes)
        self.domain = domain
        where = f" ({domain} domain)" if domain else ""
        super().__init__(f"no candidate samples for classes {self.empty_classes}{where}")


class DeterminismError(PDAError, RuntimeError):
    exit_code = 3


class NumericalError(PDAError, FloatingPointError):
    exit_code = 3

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
