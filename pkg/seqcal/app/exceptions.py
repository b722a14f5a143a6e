import logging
from typing import Any, Optional

logger = logging.getLogger(__name__)


class SeqcalError(Exception):
    exit_code = 1

    def __init__(self, message: str | None = None):
        super().__init__(message or self.__class__.__name__)

    def to_dict(self):
        return {"error": self.__class__.__name__, "message": str(self)}


class ConfigInvalid(SeqcalError):
    exit_code = 2

    def __init__(self, message: str | None = None, field: Optional[str] = None):
        super().__init__(message)
        self.field = field

    def to_dict(self):
        out = super().to_dict()
        if self.field is not None:
            out["field"] = self.field
        return out


class InputError(SeqcalError):
    exit_code = 2


class DimensionMismatch(InputError):
    pass


class LengthMismatch(InputError):
    pass


class OutOfBounds(InputError):
    pass


class EmptyHistory(InputError):
    pass


class EmptyCandidates(InputError):
    pass


class UnsupportedDimension(InputError):
    pass


class SimulatorFailure(SeqcalError):
    exit_code = 3

    def __init__(self, message: str | None = None, partial_result: Any = None):
        super().__init__(message)
        self.partial_result = partial_result


class SimulatorTimeout(SimulatorFailure):
    pass


class ProtocolViolation(SimulatorFailure):
    pass


class NonzeroExit(SimulatorFailure):
    pass


class NumericalError(SeqcalError):
    exit_code = 4


class CholeskyFailure(NumericalError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


class DegenerateData(NumericalError):
    pass


class OptimFailure(NumericalError):
    pass


class SchedulerError(SeqcalError):
    exit_code = 4


class PoolClosed(SchedulerError):
    pass


class Deadlock(SchedulerError):
    pass


class NotFoundError(SeqcalError):
    exit_code = 1


class DatabaseError(SeqcalError):
    exit_code = 1


def exit_code_for(err: BaseException) -> int:
    """Map an exception raised by a command to the process exit code."""
    if isinstance(err, SeqcalError):
        logger.error("%s: %s", err.__class__.__name__, err)
        return err.exit_code

    logger.exception("Unhandled exception: %s", err)
    return 1
