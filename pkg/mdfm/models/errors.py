from typing import Optional


class MdfmError(Exception):
    """Base error for every service; names the module and operation that failed"""

    def __init__(self, message: str, module: str = "", operation: str = ""):
        super().__init__(message)
        self.message = message
        self.module = module
        self.operation = operation

    @property
    def where(self) -> str:
        if self.module and self.operation:
            return f"{self.module}.{self.operation}"
        return self.module or self.operation or "mdfm"


class DimensionError(MdfmError):
    """Array shapes that do not fit the operation"""


class InconsistencyError(MdfmError):
    """Subject reported with a different characteristic count or group label"""


class ConflictError(MdfmError):
    """Two different values placed in the same (row, time) cell"""


class LayoutError(MdfmError):
    """Group sizes or row layout that disagree with the configuration"""


class ConfigError(MdfmError):
    """Invalid configuration, unknown series or unknown group"""


class CausalityError(MdfmError):
    """Transition blocks outside the causal region"""


class HorizonError(MdfmError):
    """Target period beyond the state horizon"""


class DegenerateUpdateError(MdfmError):
    """Coordinate update with a zero denominator"""


class NumericalError(MdfmError):
    """Non-finite values, singular innovation covariances or negative variances"""

    def __init__(self, message: str, module: str = "", operation: str = "",
                 time: Optional[int] = None, iteration: Optional[int] = None):
        super().__init__(message, module, operation)
        self.time = time
        self.iteration = iteration
