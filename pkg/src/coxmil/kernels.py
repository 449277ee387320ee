"""Backend selection for the hot loops.

The compiled extension is used when it imports; set ``COXMIL_PURE_PYTHON=1`` to
force the NumPy fallback. ``BACKEND`` names whichever was picked.
"""
import os

import numpy as np

from . import _kernels_py

_compiled = None
if not os.environ.get("COXMIL_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py


def _prep_core(times, events):
    times = np.ascontiguousarray(times, dtype=np.float64)
    events = np.ascontiguousarray(events, dtype=np.int8)
    return times, events


def concordance_counts(times, events, risks, backend=None):
    times, events = _prep_core(times, events)
    risks = np.ascontiguousarray(risks, dtype=np.float64)
    return _pick(backend).concordance_counts(times, events, risks)


def breslow_loglik(times, events, eta, backend=None):
    """Breslow log partial likelihood (summed over events) and d/d eta."""
    times, events = _prep_core(times, events)
    eta = np.ascontiguousarray(eta, dtype=np.float64)
    order = np.ascontiguousarray(np.argsort(times, kind="mergesort"), dtype=np.intp)
    return _pick(backend).breslow_loglik(times, events, eta, order)


def logrank_best_split(x, at_risk_upto, events, n_times, backend=None):
    x = np.ascontiguousarray(x, dtype=np.float64)
    at_risk_upto = np.ascontiguousarray(at_risk_upto, dtype=np.intp)
    events = np.ascontiguousarray(events, dtype=np.int8)
    return _pick(backend).logrank_best_split(x, at_risk_upto, events, int(n_times))


def _pick(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available in this build")
        return _compiled
    raise ValueError(f"unknown backend {backend!r}")
