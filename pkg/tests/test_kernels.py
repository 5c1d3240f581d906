import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ontram import kernels

BACKENDS = ["numpy"]
try:
    kernels.get_backend("compiled")
    BACKENDS.append("compiled")
except ImportError:
    pass


def brute_concordance(pred, obs):
    credit, informative = 0.0, 0
    for i in range(len(pred)):
        for j in range(i + 1, len(pred)):
            if obs[i] == obs[j]:
                continue
            informative += 1
            if pred[i] == pred[j]:
                credit += 0.5
            elif (pred[i] > pred[j]) == (obs[i] > obs[j]):
                credit += 1.0
    return credit, informative


def problem(seed, n=40, P=3, K=5, with_eta=True):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, P))
    y = rng.integers(0, K, n)
    theta = np.sort(rng.uniform(-2, 2, K - 1)) + np.arange(K - 1) * 0.1
    beta = rng.normal(0, 1, P)
    eta = rng.normal(0, 1, n) if with_eta else None
    return X, y, theta, beta, eta


@pytest.mark.parametrize("backend", BACKENDS)
def test_nll_matches_direct_formula(backend):
    X, y, theta, beta, eta = problem(0)
    nll, *_ = kernels.nll_grad(X, y, theta, beta, eta, backend=backend)
    s = X @ beta + eta
    cdf = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    upper = np.where(y == len(theta), 1.0, cdf(theta[np.minimum(y, len(theta) - 1)] - s))
    lower = np.where(y == 0, 0.0, cdf(theta[np.maximum(y - 1, 0)] - s))
    assert nll == pytest.approx(-np.log(upper - lower).mean(), abs=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_shift_gradient_is_minus_beta_direction(backend):
    # d/d eta_i and d/d beta share the same per-row factor
    X, y, theta, beta, eta = problem(1)
    _, _, g_beta, g_shift = kernels.nll_grad(X, y, theta, beta, eta, backend=backend)
    np.testing.assert_allclose(g_beta, X.T @ g_shift, rtol=1e-12, atol=1e-15)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")
@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 60), K=st.integers(2, 8),
       with_eta=st.booleans())
def test_backends_agree_on_nll_grad(seed, n, K, with_eta):
    X, y, theta, beta, eta = problem(seed, n=n, K=K, with_eta=with_eta)
    X *= 5  # reach the probability floor now and then
    a = kernels.nll_grad(X, y, theta, beta, eta, backend="numpy")
    b = kernels.nll_grad(X, y, theta, beta, eta, backend="compiled")
    assert a[0] == pytest.approx(b[0], rel=1e-13, abs=1e-15)
    for u, v in zip(a[1:], b[1:]):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-16)


@pytest.mark.parametrize("backend", BACKENDS)
def test_want_grad_false_gives_same_loss(backend):
    X, y, theta, beta, eta = problem(2)
    full = kernels.nll_grad(X, y, theta, beta, eta, backend=backend)
    loss_only = kernels.nll_grad(X, y, theta, beta, eta, want_grad=False, backend=backend)
    assert full[0] == loss_only[0]


@pytest.mark.parametrize("backend", BACKENDS)
@settings(max_examples=100, deadline=None)
@given(pairs=st.lists(st.tuples(st.integers(0, 5), st.integers(-1, 1)), min_size=0,
                      max_size=30))
def test_pair_concordance_matches_brute_force(backend, pairs):
    pred = np.array([p for p, _ in pairs], dtype=float)
    obs = np.array([o for _, o in pairs], dtype=float)
    got = kernels.pair_concordance(pred, obs, backend=backend)
    want = brute_concordance(pred, obs)
    assert got[1] == want[1]
    assert got[0] == want[0]


def test_pair_concordance_large_input_is_chunked():
    rng = np.random.default_rng(3)
    pred = rng.integers(0, 20, 1500).astype(float)
    obs = rng.integers(-1, 2, 1500).astype(float)
    results = {b: kernels.pair_concordance(pred, obs, backend=b) for b in BACKENDS}
    assert len(set(results.values())) == 1


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_active_backend_reported():
    assert kernels.BACKEND in ("compiled", "numpy")
