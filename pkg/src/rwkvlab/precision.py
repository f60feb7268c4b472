"""Global run precision (f32 default, f64 for verification) and numeric check mode.

Precision is a process-wide run mode, not a per-tensor property: every tensor
created after a switch uses the new dtype. Mixing tensors from different modes
in one computation is not supported and will surface as a dtype mismatch.
"""

import os

import numpy as np

_MODES = {"f32": np.float32, "f64": np.float64}

_ENV_VAR = "ARWKV_PRECISION"

_mode = os.environ.get(_ENV_VAR, "f32")
if _mode not in _MODES:
    raise RuntimeError(f"{_ENV_VAR} must be one of {sorted(_MODES)}, got {_mode!r}")

_check_finite = False


def set_precision(mode: str) -> None:
    global _mode
    if mode not in _MODES:
        raise ValueError(f"precision must be one of {sorted(_MODES)}, got {mode!r}")
    _mode = mode


def precision_mode() -> str:
    return _mode


def active_dtype():
    return _MODES[_mode]


def set_check_finite(flag: bool) -> None:
    """Enable per-operation NaN/Inf detection (slower; off by default)."""
    global _check_finite
    _check_finite = bool(flag)


def check_finite_enabled() -> bool:
    return _check_finite


class use_precision:
    """Context manager that switches run precision and restores it on exit."""

    def __init__(self, mode: str):
        if mode not in _MODES:
            raise ValueError(f"precision must be one of {sorted(_MODES)}, got {mode!r}")
        self.mode = mode
        self._saved = None

    def __enter__(self):
        self._saved = _mode
        set_precision(self.mode)
        return self

    def __exit__(self, *exc):
        set_precision(self._saved)
        return False
