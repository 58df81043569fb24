"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the NumPy
fallback is loaded. ``use_backend`` switches explicitly (tests and the
benchmark compare both).
"""
from types import ModuleType

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

QP_LEN = _kernels_py.QP_LEN
PP_LEN = _kernels_py.PP_LEN
EVENT_SLACK = _kernels_py.EVENT_SLACK
EVENT_TAUT = _kernels_py.EVENT_TAUT

_active: ModuleType = _compiled if _compiled is not None else _kernels_py


def available_backends():
    return ["cython", "python"] if _compiled is not None else ["python"]


def backend_name():
    return "cython" if _active is _compiled and _compiled is not None else "python"


def get_backend(name=None):
    if name is None:
        return _active
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def use_backend(name):
    """Select the process-wide backend; returns the previous name."""
    global _active
    prev = backend_name()
    _active = get_backend(name)
    return prev


def quad_integrate(x, u, w, qp, dt, nsub):
    return _active.quad_integrate(x, u, w, qp, dt, nsub)


def quad_rollout(x0, us, ws, qp, dt, nsub):
    return _active.quad_rollout(x0, us, ws, qp, dt, nsub)


def quad_linearize(xs, us, ws, qp, dt, nsub, eps):
    return _active.quad_linearize(xs, us, ws, qp, dt, nsub, eps)


def plant_integrate(s, taut, u, pp, dt, nsub):
    return _active.plant_integrate(s, taut, u, pp, dt, nsub)


def plant_eval(s, taut, u, pp):
    return _active.plant_eval(s, taut, u, pp)
