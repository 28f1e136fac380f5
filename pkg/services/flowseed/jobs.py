"""
Job runner for planner subcommands.

Each CLI invocation becomes a Job with its own structured log; when the job
ends, its summary is written as JSON next to the log.
"""
import hashlib
import json
import uuid
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from errors import ConfigurationError
from logging_utils import Stage, StructuredLogHandler
from paths import WorkspacePaths
from settings import get_settings


class JobStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _camel(name: str) -> str:
    head, *rest = name.split("_")
    return head + "".join(part.title() for part in rest)


@dataclass
class Job:
    id: str
    kind: str
    status: JobStatus = JobStatus.PENDING
    stage: Stage = Stage.IDLE
    progress: float = 0.0
    options: Dict[str, Any] = field(default_factory=dict)
    created_at: str = field(default_factory=_utc_now)
    started_at: Optional[str] = None
    finished_at: Optional[str] = None
    error: Optional[str] = None
    log_path: Optional[str] = None
    artifacts: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        """camelCase summary, enums as their values."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[_camel(f.name)] = value.value if isinstance(value, Enum) else value
        return out

    def transition(self, status: JobStatus, stage: Optional[Stage] = None):
        self.status = status
        if stage is not None:
            self.stage = stage
        if status == JobStatus.RUNNING and self.started_at is None:
            self.started_at = _utc_now()
        elif status in (JobStatus.COMPLETED, JobStatus.FAILED):
            self.finished_at = _utc_now()


class JobManager:
    """In-memory registry of jobs for one process."""

    def __init__(self, workspace: Optional[WorkspacePaths] = None):
        self.workspace = workspace or WorkspacePaths()
        self._jobs: Dict[str, Job] = {}
        self._loggers: Dict[str, StructuredLogHandler] = {}

    def create_job(self, kind: str, options: Optional[Dict[str, Any]] = None) -> Job:
        job_id = uuid.uuid4().hex[:12]
        log_path = self.workspace.get_log_path(job_id)
        job = Job(id=job_id, kind=kind, options=dict(options or {}), log_path=str(log_path))
        self._jobs[job_id] = job

        settings = get_settings()
        self._loggers[job_id] = StructuredLogHandler(
            log_path, level=settings.LOG_LEVEL, console=settings.LOG_TO_CONSOLE
        )
        return job

    def get_logger(self, job_id: str) -> Optional[StructuredLogHandler]:
        return self._loggers.get(job_id)

    def run_job(self, job_id: str, func: Callable[..., Any], *args, **kwargs) -> Any:
        """
        Run func(job, logger, *args, **kwargs) synchronously.

        Exceptions are logged, recorded on the job and re-raised. The logger
        is closed and the summary written whatever the outcome.
        """
        job = self._jobs.get(job_id)
        if job is None:
            raise ConfigurationError(f"Job {job_id} not found")
        logger = self._loggers.get(job_id)
        job.transition(JobStatus.RUNNING)

        try:
            result = func(job, logger, *args, **kwargs)
        except Exception as e:
            job.transition(JobStatus.FAILED, Stage.ERROR)
            job.error = str(e)
            if logger:
                logger.error(Stage.ERROR, f"{job.kind} failed: {e}", details={"type": type(e).__name__})
            raise
        else:
            job.transition(JobStatus.COMPLETED, Stage.COMPLETE)
            job.progress = 100.0
            if logger:
                logger.info(Stage.COMPLETE, f"{job.kind} completed", 100.0)
            return result
        finally:
            self.workspace.get_job_summary_path(job.id).write_text(
                json.dumps(job.to_dict(), ensure_ascii=False, indent=2, default=str), encoding="utf-8"
            )
            if logger:
                logger.close()
            self._loggers.pop(job_id, None)


def compute_file_hash(file_path: Path, chunk_size: int = 1 << 16) -> str:
    """SHA-256 hex digest of a file, streamed in chunks."""
    digest = hashlib.sha256()
    with open(file_path, "rb") as f:
        while chunk := f.read(chunk_size):
            digest.update(chunk)
    return digest.hexdigest()
