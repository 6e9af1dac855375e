from enum import Enum


class ErrorCode(Enum):
    INPUT = "E_INPUT"
    RANGE = "E_RANGE"
    EMPTY = "E_EMPTY"
    SHAPE = "E_SHAPE"
    DIVERGED = "E_DIVERGED"
    DEGENERATE = "E_DEGENERATE"
    FORMAT = "E_FORMAT"
    CONFIG = "E_CONFIG"
    IO = "E_IO"
    STATE = "E_STATE"
    GUARD = "E_GUARD"


class QGError(Exception):
    """
    Base class for all qgnn errors.
    """

    def __init__(self, msg: str, code: ErrorCode = ErrorCode.INPUT, where=None):
        super().__init__(msg)
        self.msg = msg
        self.code = code
        self.where = where

    def __str__(self):
        return self.msg

    def one_line(self) -> str:
        """Machine-parseable form used by the command line."""
        return f"error[{self.code.value}]: " + " ".join(self.msg.split())
