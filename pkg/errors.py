from typing import Optional


class SimulatorError(Exception):
    """Base class for every error the simulator raises on purpose.

    `exit_code` plays the role an HTTP status code plays for an API: the CLI
    exits with it so callers can tell failure classes apart.
    """

    exit_code: int = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


# Config errors
class ConfigParseError(SimulatorError):
    exit_code = 2

    def __init__(self, detail: str, line: Optional[int] = None):
        if line is not None:
            detail = f"line {line}: {detail}"
        super().__init__(detail)
        self.line = line


class ConfigValidationError(SimulatorError):
    exit_code = 2

    def __init__(self, detail: str, field: Optional[str] = None):
        if field is not None:
            detail = f"{field}: {detail}"
        super().__init__(detail)
        self.field = field


# Dataset file errors
class FormatError(SimulatorError):
    exit_code = 3

    def __init__(self, detail: str, row: Optional[int] = None):
        if row is not None:
            detail = f"row {row}: {detail}"
        super().__init__(detail)
        self.row = row


class BinaryViolation(FormatError):
    pass


# Graph errors
class GraphValidationError(SimulatorError):
    exit_code = 4


class EmptyEdgeSet(SimulatorError):
    exit_code = 4


class InsufficientNodes(SimulatorError):
    exit_code = 4


class EmptyClient(SimulatorError):
    exit_code = 4


# Numerical errors
class ShapeMismatch(SimulatorError):
    exit_code = 5


class NonFiniteError(SimulatorError):
    exit_code = 5

    def __init__(self, detail: str, client_id: Optional[int] = None, round: Optional[int] = None):
        self.reason = detail
        prefix = []
        if round is not None:
            prefix.append(f"round {round}")
        if client_id is not None:
            prefix.append(f"client {client_id}")
        if prefix:
            detail = f"{', '.join(prefix)}: {detail}"
        super().__init__(detail)
        self.client_id = client_id
        self.round = round


# Statistics errors
class ZeroVariance(SimulatorError):
    exit_code = 6


class EmptyGroup(SimulatorError):
    exit_code = 6


class ZeroSigma(SimulatorError):
    exit_code = 6


class UnrealizableD(SimulatorError):
    exit_code = 6
