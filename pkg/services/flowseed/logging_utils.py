"""
Structured logging for planner jobs.

Every entry is one JSON object per line in the job's log file, prefixed by the
stdlib formatter's timestamp and level. The last entries are also kept in memory
so a job summary can show what happened right before a failure.
"""
import json
import logging
import logging.handlers
import sys
from collections import deque
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from enum import Enum
from functools import partialmethod
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional


class LogLevel(str, Enum):
    DEBUG = "debug"
    INFO = "info"
    WARNING = "warning"
    ERROR = "error"

    @property
    def numeric(self) -> int:
        return logging.getLevelName(self.name)


class Stage(str, Enum):
    """Planner stage an entry belongs to."""
    IDLE = "idle"
    GEN_DATA = "gen_data"
    EXPERT = "expert"
    TRAIN = "train"
    EVAL = "eval"
    PLAN = "plan"
    PLOT = "plot"
    SELFTEST = "selftest"
    COMPLETE = "complete"
    ERROR = "error"


@dataclass
class LogEntry:
    timestamp: str
    level: str
    stage: str
    message: str
    progress: Optional[float] = None  # 0-100
    details: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        # Optional fields are omitted rather than written as null
        return {k: v for k, v in asdict(self).items() if v is not None and v != {}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, default=str)


class StructuredLogHandler:
    """
    JSON-lines job log backed by a rotating file handler.

    `level` filters what reaches the file and the console; the tail buffer
    keeps every entry.
    """

    FILE_MAX_BYTES = 10 * 1024 * 1024
    FILE_BACKUPS = 5

    def __init__(
        self,
        log_path: Path,
        max_tail_lines: int = 100,
        level: str = "DEBUG",
        console: bool = False,
    ):
        self.log_path = Path(log_path)
        self.tail: Deque[LogEntry] = deque(maxlen=max_tail_lines)
        self._handlers: List[logging.Handler] = []
        self._logger = self._build_logger(level, console)

    def _build_logger(self, level: str, console: bool) -> logging.Logger:
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        logger = logging.getLogger(f"flowseed.job.{self.log_path.stem}")
        logger.setLevel(getattr(logging, level.upper(), logging.DEBUG))
        logger.propagate = False
        logger.handlers.clear()

        file_handler = logging.handlers.RotatingFileHandler(
            self.log_path, maxBytes=self.FILE_MAX_BYTES, backupCount=self.FILE_BACKUPS, encoding="utf-8"
        )
        file_handler.setFormatter(logging.Formatter("%(asctime)s - %(levelname)s - %(message)s"))
        self._handlers.append(file_handler)

        if console:
            echo = logging.StreamHandler(sys.stderr)
            echo.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
            self._handlers.append(echo)

        for handler in self._handlers:
            logger.addHandler(handler)
        return logger

    def log(
        self,
        level: LogLevel,
        stage: Stage,
        message: str,
        progress: Optional[float] = None,
        details: Optional[Dict[str, Any]] = None,
    ):
        entry = LogEntry(
            timestamp=datetime.now(timezone.utc).isoformat(),
            level=level.value,
            stage=stage.value,
            message=message,
            progress=progress,
            details=details,
        )
        self.tail.append(entry)
        self._logger.log(level.numeric, entry.to_json())

    debug = partialmethod(log, LogLevel.DEBUG)
    info = partialmethod(log, LogLevel.INFO)
    warning = partialmethod(log, LogLevel.WARNING)
    error = partialmethod(log, LogLevel.ERROR)

    def get_tail(self, lines: int = 50) -> List[Dict[str, Any]]:
        """Last `lines` entries, oldest first."""
        return [entry.to_dict() for entry in list(self.tail)[-lines:]]

    def close(self):
        for handler in self._handlers:
            handler.close()
            self._logger.removeHandler(handler)
        self._handlers.clear()
