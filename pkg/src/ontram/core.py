"""Ordinal transformation model: latent logistic CDF, monotone cut-points,
class probabilities, negative log-likelihood and its analytic gradient.

Conventions
-----------
Outcome classes are 0-based (class index == mRS value). Cut-points are
stored 0-based as well: ``theta[j]`` separates class ``j`` from ``j + 1``,
so the cumulative probability is ``P(Y <= j | x, e) = F(theta[j] - shift)``
with ``shift = x @ beta + eta(e)``. Larger shifts move mass to higher
(worse) classes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import DomainError, ShapeError

PROB_FLOOR = 1e-12
HEAD_KEYS = ("W1", "b1", "W2", "b2", "w3", "b3")
PARAM_GROUPS = {
    "cutpoints": ("gamma",),
    "linear": ("beta",),
    "head": HEAD_KEYS,
}


@dataclass(frozen=True)
class OutcomeScale:
    """Number of ordinal classes and the last class counted as favorable."""

    class_count: int = 7
    favorable_cut: int = 2

    def __post_init__(self):
        if self.class_count < 2:
            raise DomainError(f"class_count must be >= 2, got {self.class_count}")
        if not 0 <= self.favorable_cut < self.class_count - 1:
            raise DomainError(
                f"favorable_cut must lie in [0, {self.class_count - 2}], got {self.favorable_cut}"
            )

    @property
    def n_cutpoints(self) -> int:
        return self.class_count - 1


def latent_cdf(z):
    """Standard logistic CDF. Raises :class:`DomainError` on non-finite input."""
    arr = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("latent_cdf requires finite input")
    if arr.ndim == 0:
        z = float(arr)
        if z >= 0:
            return 1.0 / (1.0 + math.exp(-z))
        e = math.exp(z)
        return e / (1.0 + e)
    return kernels._fallback._cdf(arr)


def _logistic(z):
    # internal, no finiteness check; z is an ndarray
    return kernels._fallback._cdf(np.asarray(z, dtype=np.float64))


def cutpoints_from_raw(gamma) -> np.ndarray:
    """theta_0 = gamma_0, theta_j = theta_{j-1} + exp(gamma_j)."""
    gamma = np.asarray(gamma, dtype=np.float64)
    incr = np.concatenate([gamma[:1], np.exp(gamma[1:])])
    return np.cumsum(incr)


def raw_from_cutpoints(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    steps = np.diff(theta)
    if np.any(steps <= 0):
        raise DomainError("cut-points must be strictly increasing")
    return np.concatenate([theta[:1], np.log(steps)])


def _frozen_array(a, ndim=None, name="array"):
    a = np.array(a, dtype=np.float64, copy=True)
    if ndim is not None and a.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-dimensional, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} contains non-finite values")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EmbeddingHead:
    """Feed-forward head mapping an embedding vector to a scalar shift.

    ``d_emb -> hidden[0] -> hidden[1] -> 1`` with ReLU on the hidden layers
    and inverted dropout (training only) after each hidden activation.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    dropout: float = 0.3

    def __post_init__(self):
        for key, ndim in zip(HEAD_KEYS, (2, 1, 2, 1, 1, 1)):
            object.__setattr__(self, key, _frozen_array(getattr(self, key), ndim, key))
        h1, h2 = self.W1.shape[1], self.W2.shape[1]
        if (self.b1.shape != (h1,) or self.W2.shape[0] != h1 or self.b2.shape != (h2,)
                or self.w3.shape != (h2,) or self.b3.shape != (1,)):
            raise ShapeError("inconsistent head layer shapes")
        if not 0.0 <= self.dropout < 1.0:
            raise DomainError(f"dropout rate must lie in [0, 1), got {self.dropout}")

    @classmethod
    def initialize(cls, d_emb, rng, hidden=(256, 128), dropout=0.3):
        """Glorot-uniform weights, zero biases."""
        sizes = (d_emb, *hidden, 1)
        weights = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        return cls(
            W1=weights[0], b1=np.zeros(hidden[0]),
            W2=weights[1], b2=np.zeros(hidden[1]),
            w3=weights[2][:, 0], b3=np.zeros(1),
            dropout=dropout,
        )

    @property
    def d_emb(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> tuple[int, int]:
        return self.W1.shape[1], self.W2.shape[1]

    def draw_masks(self, n, rng):
        """Inverted-dropout masks for ``n`` rows; ``None`` when the rate is 0."""
        if self.dropout == 0.0:
            return None
        keep = 1.0 - self.dropout
        h1, h2 = self.hidden
        m1 = (rng.random((n, h1)) < keep) / keep
        m2 = (rng.random((n, h2)) < keep) / keep
        return m1, m2

    def forward(self, E, masks=None):
        Z1 = E @ self.W1 + self.b1
        H1 = np.maximum(Z1, 0.0)
        if masks is not None:
            H1 = H1 * masks[0]
        Z2 = H1 @ self.W2 + self.b2
        H2 = np.maximum(Z2, 0.0)
        if masks is not None:
            H2 = H2 * masks[1]
        eta = H2 @ self.w3 + self.b3[0]
        return eta, (E, Z1, H1, Z2, H2, masks)

    def backward(self, cache, g_eta):
        E, Z1, H1, Z2, H2, masks = cache
        grads = {"w3": H2.T @ g_eta, "b3": np.array([g_eta.sum()])}
        dZ2 = np.outer(g_eta, self.w3) * (Z2 > 0)
        if masks is not None:
            dZ2 = dZ2 * masks[1]
        grads["W2"] = H1.T @ dZ2
        grads["b2"] = dZ2.sum(axis=0)
        dZ1 = (dZ2 @ self.W2.T) * (Z1 > 0)
        if masks is not None:
            dZ1 = dZ1 * masks[0]
        grads["W1"] = E.T @ dZ1
        grads["b1"] = dZ1.sum(axis=0)
        return grads


@dataclass(frozen=True, eq=False)
class ModelParams:
    """All trainable quantities plus the metadata needed to apply them.

    ``gamma`` are unconstrained cut-point parameters (see
    :func:`cutpoints_from_raw`), ``beta`` the linear coefficients aligned
    with ``feature_names``. ``head`` is ``None`` for clinical-only models.
    """

    gamma: np.ndarray
    beta: np.ndarray
    feature_names: tuple[str, ...]
    treatment_index: int | None
    scale: OutcomeScale = field(default_factory=OutcomeScale)
    head: EmbeddingHead | None = None

    def __post_init__(self):
        object.__setattr__(self, "gamma", _frozen_array(self.gamma, 1, "gamma"))
        object.__setattr__(self, "beta", _frozen_array(self.beta, 1, "beta"))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if self.gamma.shape[0] != self.scale.n_cutpoints:
            raise ShapeError(
                f"expected {self.scale.n_cutpoints} cut-point parameters, got {self.gamma.shape[0]}"
            )
        if len(self.feature_names) != self.beta.shape[0]:
            raise ShapeError("beta length does not match feature_names")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise ShapeError("feature names must be unique")
        if self.treatment_index is not None and not 0 <= self.treatment_index < len(self.beta):
            raise ShapeError(f"treatment_index {self.treatment_index} out of range")
        theta = cutpoints_from_raw(self.gamma)
        if not np.all(np.isfinite(theta)) or np.any(np.diff(theta) <= 0):
            raise DomainError("cut-points are not finite and strictly increasing")
        theta.setflags(write=False)
        object.__setattr__(self, "_theta", theta)

    @property
    def theta(self) -> np.ndarray:
        return self._theta

    @property
    def n_features(self) -> int:
        return self.beta.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed by name (copies)."""
        out = {"gamma": self.gamma.copy(), "beta": self.beta.copy()}
        if self.head is not None:
            out.update({k: getattr(self.head, k).copy() for k in HEAD_KEYS})
        return out

    def with_arrays(self, arrays) -> ModelParams:
        head = self.head
        if head is not None:
            head = replace(head, **{k: arrays.get(k, getattr(head, k)) for k in HEAD_KEYS})
        return replace(
            self,
            gamma=arrays.get("gamma", self.gamma),
            beta=arrays.get("beta", self.beta),
            head=head,
        )

    def with_head(self, head: EmbeddingHead | None) -> ModelParams:
        return replace(self, head=head)

    def with_cutpoints(self, theta) -> ModelParams:
        return replace(self, gamma=raw_from_cutpoints(theta))


def _check_inputs(params, X, E):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.n_features:
        raise ShapeError(f"expected {params.n_features} features, got shape {np.shape(X)}")
    if params.head is None:
        if E is not None:
            raise ShapeError("embeddings supplied to a model without an embedding head")
    else:
        if E is None:
            raise ShapeError("model has an embedding head but no embeddings were supplied")
        E = np.asarray(E, dtype=np.float64)
        if E.ndim == 1:
            E = E[None, :]
        if E.shape != (X.shape[0], params.head.d_emb):
            raise ShapeError(
                f"embeddings must have shape ({X.shape[0]}, {params.head.d_emb}), got {E.shape}"
            )
    return X, E, single


def linear_shift(params: ModelParams, X, E=None, masks=None) -> np.ndarray:
    """Per-row shift ``x @ beta + eta(e)``; eta is 0 without a head."""
    X, E, single = _check_inputs(params, X, E)
    s = X @ params.beta
    if params.head is not None:
        s = s + params.head.forward(E, masks)[0]
    return s[0] if single else s


def transformation(params: ModelParams, k: int, x, e=None):
    """``theta_k - x @ beta - eta(e)`` for the 1-based cut-point index ``k``."""
    if not 1 <= k <= params.scale.n_cutpoints:
        raise ShapeError(f"cut-point index must lie in [1, {params.scale.n_cutpoints}], got {k}")
    return params.theta[k - 1] - linear_shift(params, x, e)


def cumulative_probabilities(params: ModelParams, X, E=None) -> np.ndarray:
    """``P(Y <= j)`` for j = 0 .. K-2, shape ``(n, K-1)`` (or ``(K-1,)``)."""
    s = np.atleast_1d(linear_shift(params, X, E))
    cum = _logistic(params.theta[None, :] - s[:, None])
    return cum[0] if np.ndim(X) == 1 else cum


def class_probabilities(params: ModelParams, X, E=None) -> np.ndarray:
    """Probability of every class, shape ``(n, K)`` (or ``(K,)`` for one row)."""
    cum = np.atleast_2d(cumulative_probabilities(params, X, E))
    n = cum.shape[0]
    padded = np.hstack([np.zeros((n, 1)), cum, np.ones((n, 1))])
    probs = np.diff(padded, axis=1)
    return probs[0] if np.ndim(X) == 1 else probs


def favorable_probability(params: ModelParams, X, E=None):
    """``P(Y <= favorable_cut)``, i.e. the CDF at the cut after the favorable block."""
    s = np.atleast_1d(linear_shift(params, X, E))
    out = _logistic(params.theta[params.scale.favorable_cut] - s)
    return float(out[0]) if np.ndim(X) == 1 else out


def _check_batch(params, y):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] == 0:
        raise DomainError("NLL needs a non-empty batch")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise DomainError("observed classes must be integers")
        y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= params.scale.class_count:
        raise DomainError(f"observed classes must lie in [0, {params.scale.class_count - 1}]")
    return y


def negative_log_likelihood(params: ModelParams, X, y, E=None, floor=PROB_FLOOR) -> float:
    """Mean negative log-probability of the observed classes."""
    y = _check_batch(params, y)
    X, E, _ = _check_inputs(params, X, E)
    if X.shape[0] != y.shape[0]:
        raise ShapeError("X and y disagree on the number of rows")
    eta = params.head.forward(E)[0] if params.head is not None else None
    nll, *_ = kernels.nll_grad(X, y, params.theta, params.beta, eta, floor, want_grad=False)
    return float(nll)


def loss_and_gradient(params: ModelParams, X, y, E=None, rng=None, masks=None,
                      floor=PROB_FLOOR):
    """Mean NLL and its gradient w.r.t. every array in :meth:`ModelParams.arrays`.

    When ``rng`` is given and the model has a head, dropout masks are drawn
    once for the call (training mode). Explicit ``masks`` take precedence.
    """
    y = _check_batch(params, y)
    X, E, _ = _check_inputs(params, X, E)
    if X.shape[0] != y.shape[0]:
        raise ShapeError("X and y disagree on the number of rows")
    head = params.head
    eta = cache = None
    if head is not None:
        if masks is None and rng is not None:
            masks = head.draw_masks(X.shape[0], rng)
        eta, cache = head.forward(E, masks)
    nll, g_theta, g_beta, g_shift = kernels.nll_grad(X, y, params.theta, params.beta, eta, floor)

    # theta_j depends on gamma_0 and on exp(gamma_m) for every m <= j
    tail = np.cumsum(g_theta[::-1])[::-1]
    g_gamma = tail * np.concatenate([[1.0], np.exp(params.gamma[1:])])
    grads = {"gamma": g_gamma, "beta": g_beta}
    if head is not None:
        grads.update(head.backward(cache, g_shift))
    return float(nll), grads


def nll_gradient(params: ModelParams, X, y, E=None, rng=None, masks=None) -> dict[str, np.ndarray]:
    """Gradient of :func:`negative_log_likelihood`, keyed like :meth:`ModelParams.arrays`."""
    return loss_and_gradient(params, X, y, E, rng=rng, masks=masks)[1]
