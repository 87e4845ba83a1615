"""REST gateway: experiment intake, durable task queue, status and results."""

from .app import create_app
from .policy import DEFAULT_MAX_UPLOAD, read_upload
from .service import Gateway
from .store import ExperimentStore
from .taskqueue import TaskKind, TaskQueue, TaskQueueEntry

__all__ = [
    "DEFAULT_MAX_UPLOAD",
    "ExperimentStore",
    "Gateway",
    "TaskKind",
    "TaskQueue",
    "TaskQueueEntry",
    "create_app",
    "read_upload",
]
