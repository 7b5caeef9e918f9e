"""Hot-kernel backend selection.

Prefers the compiled Cython core when it was built, otherwise falls back
to the numpy reference implementation. Both expose the same functions
with identical semantics; `cmlo.kernels.py_core` is always importable for
parity tests and benchmarking.
"""

from cmlo.kernels import py_core

try:
    from cmlo.kernels import _core as _active
except ImportError:
    _active = py_core

BACKEND = _active.BACKEND

ensemble_members_forward = _active.ensemble_members_forward
ensemble_step = _active.ensemble_step
ensemble_rollout = _active.ensemble_rollout
hull_area = _active.hull_area


def backends():
    """All importable backends, name -> module."""
    out = {"python": py_core}
    if _active is not py_core:
        out[BACKEND] = _active
    return out
