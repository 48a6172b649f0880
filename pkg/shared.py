from __future__ import annotations

import os
import json
import time
import hashlib
import logging
import tempfile
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, TypedDict, TypeVar

import pandas as pd
from dotenv import load_dotenv

# Load environment variables
load_dotenv(dotenv_path=os.path.join(os.path.dirname(__file__), '.env'), override=False)

TOOL_VERSION = "1.0.0"
PACKAGE_DIR = os.path.dirname(os.path.abspath(__file__))

MAX_PARALLEL = int(os.getenv("PORT_RESILIENCE_THREADS", "1"))

# Load the AIS ship-type code table
with open(os.path.join(PACKAGE_DIR, 'vessel_types.json'), 'r') as f:
    VESSEL_TYPE_DATA = json.load(f)

RFC3339 = "%Y-%m-%dT%H:%M:%SZ"
FLOAT_FORMAT = "%.10g"

# === ERRORS ===
class PipelineError(Exception):
    """Base error for stage failures; carries the CLI exit code."""
    exit_code = 1


class MissingInputError(PipelineError):
    exit_code = 2


class ValidationError(PipelineError):
    exit_code = 3


class NonConvergenceError(PipelineError):
    exit_code = 4


class QuadratureError(RuntimeError):
    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# === LOGGING UTIL ===
logger = logging.getLogger("port_resilience")
if not logger.handlers:
    _stream = logging.StreamHandler()
    _stream.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(_stream)
    logger.setLevel(logging.INFO)
    logger.propagate = True


def log_event(event: str, text: str, agent: str = "system"):
    line = f"[{time.strftime('%H:%M:%S')}] [{agent.upper()}] {event.upper()}: {str(text).strip()[:5000]}"
    level = logging.WARNING if ("warning" in event or "flag" in event or "error" in event) else logging.INFO
    logger.log(level, line)


def configure_log_file(path: str):
    """Attach a file handler (one per path) so CLI runs keep a pipeline.log."""
    path = os.path.abspath(path)
    for h in logger.handlers:
        if isinstance(h, logging.FileHandler) and h.baseFilename == path:
            return
    os.makedirs(os.path.dirname(path), exist_ok=True)
    fh = logging.FileHandler(path, encoding="utf-8")
    fh.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(fh)


# === CONCURRENCY ===
T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> List[R]:
    """Map fn over items on at most `threads` workers; output keeps input order."""
    items = list(items)
    n = threads if threads is not None else MAX_PARALLEL
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# === FILE UTIL ===
def atomic_write_text(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp_", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str, payload: Any):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def write_table(path: str, df: pd.DataFrame, columns: Optional[Sequence[str]] = None):
    if columns is not None:
        df = df.reindex(columns=list(columns))
    atomic_write_text(path, df.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n"))


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def text_sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def fmt_time(ts) -> str:
    """RFC 3339 UTC string for a datetime / pandas Timestamp (naive = UTC)."""
    ts = pd.Timestamp(ts)
    if ts.tzinfo is not None:
        ts = ts.tz_convert("UTC")
    return ts.strftime(RFC3339)


def parse_time(text: str) -> pd.Timestamp:
    ts = pd.Timestamp(text)
    return ts.tz_convert("UTC") if ts.tzinfo is not None else ts.tz_localize("UTC")


class PipelineState(TypedDict):
    stages: List[str]
    completed: List[str]
    current: Optional[str]
    rc: int
    message: str
    artifacts: Dict[str, List[str]]
