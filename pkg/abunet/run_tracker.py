"""
Module for tracking training run status in the run directory.
"""
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, Field

from .utils import format_timestamp

logger = logging.getLogger(__name__)

STATUS_FILE = "status.json"
RESULT_FILE = "result.json"


class RunStatus(str, Enum):
    """Enum for run status values."""
    QUEUED = "queued"
    IN_PROGRESS = "in_progress"
    COMPLETE = "complete"
    ERROR = "error"


class RunSummary(BaseModel):
    """Outcome of one completed run, stored as result.json."""
    run_id: str = Field(..., description="Run directory name")
    arch: str
    activation: str
    task: str
    optimizer: str
    seed: int
    steps: int
    param_count: int
    checkpoints: List[int] = Field(default_factory=list, description="Steps with a saved checkpoint")
    selected_step: int
    selected_checkpoint: Optional[str] = Field(None, description="Path of the selected checkpoint, relative to the run directory")
    selected_val_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None
    alpha_init: str = "default"
    alpha_trainable: bool = True
    alpha_normalize_first: bool = False


class RunTracker:
    """Handles status.json and result.json of one run directory."""

    def __init__(self, run_dir: Union[str, Path]):
        self.run_dir = Path(run_dir)

    @property
    def status_path(self) -> Path:
        return self.run_dir / STATUS_FILE

    @property
    def result_path(self) -> Path:
        return self.run_dir / RESULT_FILE

    def _write(self, data: Dict[str, Any]) -> Dict[str, Any]:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.status_path.write_text(json.dumps(data, indent=2), encoding="utf-8")
        return data

    def create_run(self, run_id: str) -> Dict[str, Any]:
        """
        Create a new run record in queued state.

        Args:
            run_id: Identifier of the run (its directory name)

        Returns:
            Dict containing the status record
        """
        now = format_timestamp()
        return self._write({
            "run_id": run_id,
            "status": RunStatus.QUEUED.value,
            "created_at": now,
            "updated_at": now,
        })

    def update_status(self, status: RunStatus, error_message: Optional[str] = None) -> Dict[str, Any]:
        """
        Update the status of the run.

        Args:
            status: New status
            error_message: Optional error message if status is ERROR

        Returns:
            Dict containing the updated record
        """
        data = self.get_status() or {"run_id": self.run_dir.name, "created_at": format_timestamp()}
        data["status"] = RunStatus(status).value
        data["updated_at"] = format_timestamp()
        if error_message and status == RunStatus.ERROR:
            data["error_message"] = error_message
        logger.debug(f"Run {data['run_id']}: {data['status']}")
        return self._write(data)

    def get_status(self) -> Optional[Dict[str, Any]]:
        """Current status record, or None for a directory without one."""
        if not self.status_path.is_file():
            return None
        return json.loads(self.status_path.read_text(encoding="utf-8"))

    def is_complete(self) -> bool:
        status = self.get_status()
        return bool(status) and status["status"] == RunStatus.COMPLETE.value and self.result_path.is_file()

    def write_summary(self, summary: RunSummary) -> Path:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.result_path.write_text(summary.model_dump_json(indent=2), encoding="utf-8")
        return self.result_path

    def read_summary(self) -> Optional[RunSummary]:
        if not self.result_path.is_file():
            return None
        return RunSummary.model_validate_json(self.result_path.read_text(encoding="utf-8"))

    def selected_checkpoint(self) -> Optional[Path]:
        """Absolute path of the checkpoint chosen by post-hoc selection."""
        summary = self.read_summary()
        if summary is None or summary.selected_checkpoint is None:
            return None
        return self.run_dir / summary.selected_checkpoint
