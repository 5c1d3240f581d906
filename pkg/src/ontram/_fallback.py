"""Numpy implementations of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def _cdf(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def nll_grad(X, y, theta, beta, eta, floor, want_grad=True):
    n = X.shape[0]
    J = theta.shape[0]
    s = X @ beta
    if eta is not None:
        s = s + eta
    has_upper = y < J
    has_lower = y > 0
    a = np.where(has_upper, theta[np.minimum(y, J - 1)] - s, 0.0)
    b = np.where(has_lower, theta[np.maximum(y - 1, 0)] - s, 0.0)

    Fa, Fma = _cdf(a), _cdf(-a)
    Fb, Fmb = _cdf(b), _cdf(-b)
    both = has_upper & has_lower
    p = np.ones(n)
    p = np.where(has_upper & ~has_lower, Fa, p)
    p = np.where(has_lower & ~has_upper, Fmb, p)
    p = np.where(both & (b > 0), Fmb - Fma, p)
    p = np.where(both & (b <= 0), Fa - Fb, p)

    clamped = p < floor
    p = np.where(clamped, floor, p)
    nll = -np.log(p).sum() / n
    if not want_grad:
        return nll, np.zeros(J), np.zeros(X.shape[1]), np.zeros(n)

    live = ~clamped
    da = np.where(has_upper & live, -(Fa * Fma) / p, 0.0)
    db = np.where(has_lower & live, (Fb * Fmb) / p, 0.0)
    g_theta = np.zeros(J)
    np.add.at(g_theta, y[has_upper & live], da[has_upper & live] / n)
    np.add.at(g_theta, y[has_lower & live] - 1, db[has_lower & live] / n)
    g_shift = -(da + db) / n
    g_beta = X.T @ g_shift
    return nll, g_theta, g_beta, g_shift


def pair_concordance(pred, obs, chunk=512):
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    n = pred.shape[0]
    credit = 0.0
    informative = 0
    for start in range(0, n, chunk):
        rows = slice(start, min(start + chunk, n))
        dobs = obs[rows, None] - obs[None, :]
        dpred = pred[rows, None] - pred[None, :]
        # keep i < j only
        upper = np.arange(start, rows.stop)[:, None] < np.arange(n)[None, :]
        mask = upper & (dobs != 0)
        informative += int(mask.sum())
        concordant = mask & (dpred != 0) & ((dpred > 0) == (dobs > 0))
        ties = mask & (dpred == 0)
        credit += float(concordant.sum()) + 0.5 * float(ties.sum())
    return credit, informative
