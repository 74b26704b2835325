"""Kernel backend selection.

The compiled Cython backend is preferred when built; the NumPy fallback is
always available. `VPL_KERNELS=numpy|cython|auto` forces a choice at import
time, `set_backend` swaps it at runtime (used by the benchmark and parity
tests).
"""

import os

from . import _numpy

_BACKENDS = {"numpy": _numpy}

try:
    from . import _core

    _BACKENDS["cython"] = _core
except ImportError:
    _core = None


def available_backends():
    return sorted(_BACKENDS)


def _initial():
    choice = os.environ.get("VPL_KERNELS", "auto")
    if choice == "auto":
        return _BACKENDS.get("cython", _numpy)
    if choice not in _BACKENDS:
        raise RuntimeError(
            f"VPL_KERNELS={choice!r} but available backends are {available_backends()}"
        )
    return _BACKENDS[choice]


active = _initial()


def get_backend():
    return active.NAME


def set_backend(name):
    global active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    active = _BACKENDS[name]
