import os
import sys
from logging import DEBUG, ERROR, INFO, WARNING, FileHandler, Formatter, StreamHandler, getLogger
from typing import Optional

from colorama import Fore

from qgnn.qg_error import ErrorCode, QGError


class ColorStream:
    COLORS = {"ERROR": Fore.RED, "WARNING": Fore.YELLOW}

    def write(self, msg: str) -> None:
        level = msg.split(" ", 1)[0]
        color = self.COLORS.get(level, "")
        sys.stderr.write(color + msg + (Fore.RESET if color else ""))

    def flush(self) -> None:
        sys.stderr.flush()


logger = getLogger("qgnn")
_stream = StreamHandler(ColorStream())
_stream.setFormatter(Formatter("%(levelname)s %(message)s"))
_stream.setLevel(INFO)
logger.addHandler(_stream)
if log_file := os.environ.get("QGNN_LOG_FILE"):
    _file = FileHandler(log_file)
    _file.setFormatter(Formatter("%(asctime)s %(levelname)s %(message)s"))
    logger.addHandler(_file)
logger.setLevel(DEBUG)
logger.propagate = False


class QGErrorHandler:
    def __init__(self):
        self.log_errors = True

    @staticmethod
    def _locate(msg: str, where: Optional[int | str]) -> str:
        match where:
            case int():
                return f"line {where}: {msg}"
            case str():
                return f"{where}: {msg}"
        return msg

    def error(
        self,
        msg: str,
        where: Optional[int | str] = None,
        code: ErrorCode = ErrorCode.INPUT,
    ) -> QGError:
        """Report an error and hand it back to be raised"""
        msg = self._locate(msg, where)
        if self.log_errors:
            logger.log(ERROR if code is not ErrorCode.STATE else WARNING, msg)
        return QGError(msg, code, where)

    def within(self, e: QGError, where: int | str) -> QGError:
        """`e` under an outer context; it was reported when first raised"""
        return QGError(self._locate(e.msg, where), e.code, where)

    @staticmethod
    def quiet(level: int = WARNING) -> None:
        _stream.setLevel(level)


handler = QGErrorHandler()
