"""Python access to the fdibench core.

Configs are plain dicts in the same layout as the CLI's JSON files;
start from ``default_config()`` and edit what you need.
"""

import json

from . import _core
from ._core import ConfigError, Error, IoError, NumericalFailure, derive_seed, format_metric, metrics, sha256

__all__ = [
    "ConfigError",
    "Error",
    "IoError",
    "NumericalFailure",
    "benchmark",
    "default_config",
    "derive_seed",
    "detect",
    "format_metric",
    "metrics",
    "resilient",
    "sha256",
    "simulate",
    "symmetric_kl",
]


def default_config():
    return json.loads(_core.default_config())


def _dump(config):
    return json.dumps(config if config is not None else default_config())


def simulate(config=None):
    return _core.simulate(_dump(config))


def detect(config=None, detector="CUSUM"):
    return _core.detect(_dump(config), detector)


def resilient(config=None):
    return _core.resilient(_dump(config))


def benchmark(config=None, jobs=1):
    return _core.benchmark(_dump(config), jobs)


def symmetric_kl(p, q):
    import numpy as np

    return _core.symmetric_kl(np.asarray(p, dtype=float), np.asarray(q, dtype=float))
