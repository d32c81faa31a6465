"""Append-only JSON-lines metrics log."""

import json
import math
from pathlib import Path

from .errors import ConfigError


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


class MetricsWriter:
    """Writes one JSON object per record; the file is opened in append mode."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("a")
        except OSError as exc:
            raise ConfigError(f"cannot write metrics to {path}: {exc}") from None

    def emit(self, **record):
        self._fh.write(json.dumps(_clean(record), sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class NullMetrics:
    def emit(self, **record):
        pass


def read_metrics(path):
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]
