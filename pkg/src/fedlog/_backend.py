"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy ``_pykernels`` module. Set ``FEDLOG_BACKEND=python`` to force the
fallback. Callers go through :data:`kernels` at call time, so :func:`use`
switches every module at once.
"""

import importlib
import os

_MODULES = {"cython": "fedlog._ckernels", "python": "fedlog._pykernels"}


def available():
    names = []
    for name, mod in _MODULES.items():
        try:
            importlib.import_module(mod)
        except ImportError:
            continue
        names.append(name)
    return names


def use(name):
    """Switch the active backend; returns the previous backend name."""
    global kernels, name_in_use
    previous = name_in_use
    kernels = importlib.import_module(_MODULES[name])
    name_in_use = name
    return previous


def _initial():
    forced = os.environ.get("FEDLOG_BACKEND", "").strip().lower()
    if forced:
        if forced not in _MODULES:
            raise ImportError(f"FEDLOG_BACKEND must be one of {sorted(_MODULES)}, got {forced!r}")
        return forced
    return "cython" if "cython" in available() else "python"


kernels = None
name_in_use = None
use(_initial())
