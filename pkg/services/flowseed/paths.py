"""
Filesystem layout for datasets, checkpoints, logs and plots.
"""
from pathlib import Path
from typing import Optional
from errors import InputError
from settings import get_settings


SPLITS = ("train", "val-seen", "val-unseen")


class DatasetPaths:
    """
    Directory layout of a generated dataset.

    Structure:
    <root>/
        manifest.json
        train.jsonl
        val-seen.jsonl
        val-unseen.jsonl
    """

    def __init__(self, root: Path):
        self.root = Path(root)

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def split_path(self, split: str) -> Path:
        """Get the JSON-lines path for a split."""
        if split not in SPLITS:
            raise InputError(f"Unknown split: {split}")
        return self.root / f"{split}.jsonl"

    def ensure(self) -> "DatasetPaths":
        self.root.mkdir(parents=True, exist_ok=True)
        return self


class WorkspacePaths:
    """
    Run-scoped directory layout under DATA_DIR.

    Structure:
    <DATA_DIR>/
        logs/       (job log files and job summaries)
        plots/      (SVG case studies)
    """

    def __init__(self, base_dir: Optional[Path] = None):
        self.base_dir = Path(base_dir) if base_dir is not None else get_settings().DATA_DIR

    def _sub(self, name: str) -> Path:
        path = self.base_dir / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    @property
    def logs_dir(self) -> Path:
        return self._sub("logs")

    @property
    def plots_dir(self) -> Path:
        return self._sub("plots")

    def get_log_path(self, job_id: str) -> Path:
        """Get the log file path for a job."""
        return self.logs_dir / f"job_{job_id}.log"

    def get_job_summary_path(self, job_id: str) -> Path:
        return self.logs_dir / f"job_{job_id}.json"

    def get_plot_path(self, problem_id: str, suffix: str = "") -> Path:
        stem = sanitize_path_component(problem_id) or "problem"
        return self.plots_dir / f"{stem}{suffix}.svg"


def sanitize_path_component(value: str) -> str:
    """Sanitize a path component to prevent directory traversal."""
    return "".join(c for c in value if c.isalnum() or c in "_-").strip()
