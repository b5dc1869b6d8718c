import hashlib
import json
import os
import platform
from contextlib import contextmanager
from typing import Iterator, Optional

import numpy as np
from configura import config
from loguru import logger
from threadpoolctl import threadpool_limits

import database
from models.error import Error
from models.metric import TimeMetric
from models.run import Run

from .exceptions import ParameterError
from .types import ErrorLogType, TimeMetricType

THREADS_ENV = "POODLE_THREADS"
RUN_MANIFEST_NAME = "run_manifest.json"


def log_error(
    type: ErrorLogType,
    title: str,
    message: Optional[str] = None,
    traceback: Optional[str] = None,
    metadata: Optional[dict] = None,
) -> Optional[Error]:
    """
    Log an error into the run registry. Without an open registry the error only
    reaches the log.
    """

    logger.error(f"{title}: {message}" if message else title)
    if not database.is_ready():
        return None

    return Error.create(
        type=type, title=title, message=message, traceback=traceback, metadata=metadata
    )


def log_time_metric(
    type: TimeMetricType,
    tt: float,
    title: Optional[str] = None,
    message: Optional[str] = None,
) -> Optional[TimeMetric]:
    """
    Logs a time metric into the run registry, when one is open.
    """

    if not database.is_ready():
        return None

    return TimeMetric.create(type=type, tt=tt, title=title, message=message)


def thread_budget() -> int:
    """
    Worker count for BLAS and joblib, read from `POODLE_THREADS`.

    Returns
    -------
    `int` :
        The configured budget, or the hardware parallelism when unset.
    """

    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return os.cpu_count() or 1

    try:
        threads = int(raw)
    except ValueError:
        raise ParameterError(f"{THREADS_ENV} must be a positive integer, got '{raw}'.")

    if threads < 1:
        raise ParameterError(f"{THREADS_ENV} must be a positive integer, got '{raw}'.")

    return threads


@contextmanager
def limit_threads() -> Iterator[int]:
    threads = thread_budget()
    with threadpool_limits(limits=threads):
        yield threads


def digest(payload: dict) -> str:
    """
    sha256 of the canonical JSON encoding of `payload`.
    """

    encoded = json.dumps(payload, sort_keys=True, default=list, separators=(",", ":"))
    return hashlib.sha256(encoded.encode("utf-8")).hexdigest()


def build_id() -> str:
    return f"{config.main['name']}-{config.main['version']} numpy-{np.__version__} python-{platform.python_version()}"


def jsonable(value):
    """
    Convert tuples and numpy scalars nested in `value` into plain JSON types.
    """

    if isinstance(value, dict):
        return {str(key): jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(item) for item in value]
    if isinstance(value, np.generic):
        return value.item()

    return value


def write_run_manifest(
    out_dir: str, command: str, resolved: dict, seed: int, layout: dict[str, str]
) -> str:
    """
    Serialize the RunManifest of a command next to its outputs, and record it in
    the run registry when one is open.

    Parameters
    ----------
    - `out_dir` : str
    - `command` : str
        The command name, such as `train`.
    - `resolved` : dict
        The resolved config with every default materialized.
    - `seed` : int
    - `layout` : dict[str, str]
        Output names relative to `out_dir`.

    Returns
    -------
    `str` :
        Path to `run_manifest.json`.
    """

    manifest = {
        "command": command,
        "seed": seed,
        "build": build_id(),
        "config": jsonable(resolved),
        "layout": layout,
    }

    path = os.path.join(out_dir, RUN_MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as file:
        json.dump(manifest, file, indent=2, sort_keys=True)

    if database.is_ready():
        Run.create(**manifest)

    logger.info(f"Run manifest written to '{path}'.")
    return path


def read_run_manifest(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as file:
        return json.load(file)
