"""Kernel backend selection.

Prefers the compiled Cython extension when it was built, otherwise falls
back to the numpy implementation. `ATTNPOP_BACKEND=numpy|compiled` forces
a choice; `use()` switches at runtime (handy for benchmarks). All callers
go through the module attribute `kernels` so a switch takes effect
immediately.
"""

import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

_BACKENDS = {"numpy": _kernels_py}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled


def available():
    """Names of the backends importable in this installation."""
    return sorted(_BACKENDS)


def use(name):
    """Select the active kernel backend by name."""
    global kernels
    if name not in _BACKENDS:
        raise ValueError(
            f"unknown backend {name!r}; available: {', '.join(available())}")
    kernels = _BACKENDS[name]
    return kernels


_forced = os.environ.get("ATTNPOP_BACKEND")
if _forced:
    kernels = use(_forced)
else:
    kernels = _compiled if _compiled is not None else _kernels_py
