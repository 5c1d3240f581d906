"""Kernel dispatch.

The compiled extension is used when importable; setting the environment
variable ``ONTRAM_PURE_PYTHON=1`` forces the numpy fallback. ``BACKEND``
reports which one is active.
"""
import os

import numpy as np

from . import _fallback

_compiled = None
if os.environ.get("ONTRAM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "numpy"

__all__ = ["BACKEND", "nll_grad", "pair_concordance", "get_backend"]


def get_backend(name=None):
    """Return the kernel module ``name`` ("compiled" or "numpy"); default active one."""
    if name is None:
        name = BACKEND
    if name == "numpy":
        return _fallback
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not available")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def nll_grad(X, y, theta, beta, eta=None, floor=1e-12, want_grad=True, backend=None):
    """Mean ordinal NLL and its gradients w.r.t. cut-points, coefficients and per-row shift.

    ``y`` holds 0-based classes, ``theta`` the K-1 increasing cut-points.
    Returns ``(nll, g_theta, g_beta, g_shift)``.
    """
    mod = get_backend(backend)
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    beta = np.ascontiguousarray(beta, dtype=np.float64)
    if eta is not None:
        eta = np.ascontiguousarray(eta, dtype=np.float64)
    return mod.nll_grad(X, y, theta, beta, eta, float(floor), bool(want_grad))


def pair_concordance(pred, obs, backend=None):
    """Concordance credit over all pairs with differing ``obs``.

    Returns ``(credit, informative)``: a concordant pair earns 1, a tie in
    ``pred`` earns 0.5.
    """
    mod = get_backend(backend)
    pred = np.ascontiguousarray(pred, dtype=np.float64)
    obs = np.ascontiguousarray(obs, dtype=np.float64)
    return mod.pair_concordance(pred, obs)
