from typing import Optional


class DonorSelectError(Exception):
    """Base error of the package"""
    exit_code = 3


class ValidationError(DonorSelectError):
    """Input or configuration does not satisfy a precondition"""
    exit_code = 2


class ConfigError(ValidationError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class IngestionError(ValidationError):
    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(f"{prefix}{message}")


class PanelError(ValidationError):
    """Panel invariant or preprocessing precondition violated"""


class ProximalError(ValidationError):
    """Instrument set unusable for debiasing"""


class EmptySelectionError(ValidationError):
    """Selection procedure returned no potentially valid donors"""

    def __init__(self, report, message: str = "selection returned an empty PVD set"):
        self.report = report
        super().__init__(message)


class NumericalError(DonorSelectError):
    """Rank deficiency, non-finite input or a degenerate fit"""
