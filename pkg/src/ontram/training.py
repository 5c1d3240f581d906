"""Adam optimization with the three-stage schedule: clinical-only
pretraining, head-only training on top of frozen clinical parameters, and
full fine-tuning."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core import (
    HEAD_KEYS,
    PARAM_GROUPS,
    EmbeddingHead,
    ModelParams,
    OutcomeScale,
    loss_and_gradient,
    negative_log_likelihood,
    raw_from_cutpoints,
)
from .errors import ConfigError, InitError, OptimizationError, ShapeError

STAGES = ("clinical", "head", "finetune")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "clinical"
    epochs: int = 10_000
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    dropout: bool = False
    seed: int = 0
    trainable: tuple[str, ...] = ("cutpoints", "linear")

    def __post_init__(self):
        object.__setattr__(self, "trainable", tuple(self.trainable))
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        # epochs == 0 means "skip this stage"
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if not self.weight_decay >= 0:
            raise ConfigError("weight_decay must be >= 0")
        for g in self.trainable:
            if g not in PARAM_GROUPS:
                raise ConfigError(f"unknown parameter group {g!r}")

    def to_dict(self):
        d = asdict(self)
        d["trainable"] = list(self.trainable)
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad training config: {exc}") from exc


def default_stages() -> dict[str, TrainConfig]:
    """Published schedule. Stage A uses Adam defaults (lr 1e-3)."""
    return {
        "clinical": TrainConfig("clinical", 10_000, 128, 1e-3, 0.0, False, 0,
                                ("cutpoints", "linear")),
        "head": TrainConfig("head", 150, 2, 1e-4, 1e-6, True, 0, ("head",)),
        "finetune": TrainConfig("finetune", 150, 2, 1e-6, 1e-6, True, 0,
                                ("cutpoints", "linear", "head")),
    }


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, arrays, lr=1e-3):
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()}, 0, lr)


def _frozen_mask(frozen, key, shape):
    if frozen is None:
        return None
    if isinstance(frozen, dict):
        f = frozen.get(key, False)
        if isinstance(f, (bool, np.bool_)):
            return np.ones(shape, dtype=bool) if f else None
        f = np.asarray(f, dtype=bool)
        if f.shape != shape:
            raise ShapeError(f"frozen mask for {key!r} has shape {f.shape}, expected {shape}")
        return f
    return np.ones(shape, dtype=bool) if key in frozen else None


def adam_step(state: AdamState, params: dict, grads: dict, frozen=None,
              weight_decay: float = 0.0, decay_keys=HEAD_KEYS):
    """One bias-corrected Adam update; returns ``(new_state, new_params)``.

    ``frozen`` is a collection of keys, or a dict of key -> bool / boolean
    array; frozen entries and their moments are left untouched. Weight decay
    is decoupled (``p -= lr * wd * p``) and only touches ``decay_keys``.
    Inputs are not modified.
    """
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_m, new_v, new_p = {}, {}, {}
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {key!r} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizationError(f"non-finite gradient for {key!r}")
        m = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[key] + (1.0 - state.beta2) * (g * g)
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        upd = p - step
        if weight_decay and key in decay_keys:
            upd = upd - state.lr * weight_decay * p
        mask = _frozen_mask(frozen, key, p.shape)
        if mask is not None:
            upd = np.where(mask, p, upd)
            m = np.where(mask, state.m[key], m)
            v = np.where(mask, state.v[key], v)
        new_m[key], new_v[key], new_p[key] = m, v, upd
    return AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps), new_p


@dataclass(eq=False)
class TrainTrace:
    train_nll: list
    val_nll: list
    params: ModelParams
    config: TrainConfig
    wall_clock: float = field(default=0.0, compare=False)

    def to_dict(self):
        return {"config": self.config.to_dict(), "train_nll": list(self.train_nll),
                "val_nll": list(self.val_nll)}


def _trainable_keys(params, config):
    keys = []
    for g in config.trainable:
        if g == "head" and params.head is None:
            continue
        keys.extend(PARAM_GROUPS[g])
    return keys


def train(params: ModelParams, train_data, config: TrainConfig, val_data=None) -> TrainTrace:
    """Minibatch Adam for a fixed number of epochs; no early stopping.

    ``train_data`` / ``val_data`` are :class:`~ontram.preprocessing.Design`
    objects (anything with ``X``, ``y``, ``E``). The recorded training NLL is
    the size-weighted mean of the minibatch losses of the epoch; validation
    NLL is evaluated with dropout off after each epoch.
    """
    start = time.perf_counter()
    X, y, E = train_data.X, train_data.y, train_data.E
    n = X.shape[0]
    if (E is None) != (params.head is None):
        raise ShapeError("embeddings must be supplied exactly when the model has a head")
    if val_data is not None and E is not None and (
            val_data.E is None or val_data.E.shape[1] != E.shape[1]):
        raise ShapeError("validation embeddings do not match training embeddings")

    shuffle_rng, dropout_rng = (np.random.default_rng(s)
                                for s in np.random.SeedSequence(config.seed).spawn(2))
    keys = _trainable_keys(params, config)
    arrays = params.arrays()
    frozen = {k: k not in keys for k in arrays}
    state = AdamState.zeros(arrays, config.learning_rate)
    train_hist, val_hist = [], []
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            rows = order[lo:lo + config.batch_size]
            loss, grads = loss_and_gradient(
                params, X[rows], y[rows], None if E is None else E[rows],
                rng=dropout_rng if config.dropout else None,
            )
            if not math.isfinite(loss):
                raise OptimizationError("training loss became non-finite")
            total += loss * rows.size
            state, arrays = adam_step(state, arrays, grads, frozen, config.weight_decay)
            try:
                params = params.with_arrays(arrays)
            except ValueError as exc:
                raise OptimizationError(f"parameters left the valid region: {exc}") from exc
        train_hist.append(total / n)
        if val_data is not None:
            val_hist.append(negative_log_likelihood(params, val_data.X, val_data.y, val_data.E))
    return TrainTrace(train_hist, val_hist, params, config, time.perf_counter() - start)


def parameter_init(scale: OutcomeScale, feature_names, treatment_index, y_train,
                   d_emb: int | None = None, seed: int = 0, hidden=(256, 128),
                   dropout=0.3, min_gap=1e-2, clamp=6.0) -> ModelParams:
    """Cut-points at the logits of the empirical cumulative class frequencies.

    Each logit is clamped to ``[-clamp, clamp]`` and kept at least
    ``min_gap`` above its predecessor so empty classes still give strictly
    increasing cut-points. ``beta`` starts at zero; the head (if any) is
    Glorot-uniform with zero biases.
    """
    y_train = np.asarray(y_train)
    if np.unique(y_train).size < 2:
        raise InitError("outcome has a single observed class; cannot place cut-points")
    K = scale.class_count
    freq = np.bincount(y_train, minlength=K)[:K] / y_train.size
    cum = np.cumsum(freq)[:-1]
    theta = np.empty(K - 1)
    for j, c in enumerate(cum):
        if c <= 0:
            val = -clamp
        elif c >= 1:
            val = clamp
        else:
            val = float(np.clip(math.log(c / (1.0 - c)), -clamp, clamp))
        theta[j] = val if j == 0 else max(val, theta[j - 1] + min_gap)
    head = None
    if d_emb is not None:
        head = EmbeddingHead.initialize(d_emb, np.random.default_rng(seed), hidden, dropout)
    return ModelParams(raw_from_cutpoints(theta), np.zeros(len(feature_names)),
                       tuple(feature_names), treatment_index, scale, head)


@dataclass(eq=False)
class StagedResult:
    params: ModelParams
    traces: dict


def staged_fit(train_data, scale: OutcomeScale, stages: dict | None = None, val_data=None,
               seed: int = 0, hidden=(256, 128), dropout=0.3) -> StagedResult:
    """Stage A on clinical features; with embeddings, stage B (head only) and stage C (all).

    ``stages`` maps ``"clinical"``, ``"head"``, ``"finetune"`` to
    :class:`TrainConfig`; missing entries use :func:`default_stages`. A stage
    configured with 0 epochs is skipped.
    """
    cfg = default_stages()
    cfg.update(stages or {})
    E = train_data.E
    if E is not None:
        E = np.asarray(E)
        if E.ndim != 2 or E.shape[0] != train_data.X.shape[0]:
            raise ShapeError(f"embeddings have shape {E.shape}; expected ({train_data.X.shape[0]}, d)")
        if val_data is not None and (val_data.E is None or val_data.E.shape[1] != E.shape[1]):
            raise ShapeError("validation embeddings have a different dimension")

    params = parameter_init(scale, train_data.feature_names, train_data.treatment_index,
                            train_data.y, None, seed)
    traces = {}
    clinical_train = _without_embeddings(train_data)
    clinical_val = None if val_data is None else _without_embeddings(val_data)
    if cfg["clinical"].epochs > 0:
        traces["clinical"] = train(params, clinical_train, cfg["clinical"], clinical_val)
        params = traces["clinical"].params
    if E is None:
        return StagedResult(params, traces)

    head = EmbeddingHead.initialize(E.shape[1], np.random.default_rng([seed, 1]), hidden, dropout)
    params = params.with_head(head)
    for stage in ("head", "finetune"):
        if cfg[stage].epochs > 0:
            traces[stage] = train(params, train_data, cfg[stage], val_data)
            params = traces[stage].params
    return StagedResult(params, traces)


def _without_embeddings(design):
    return replace(design, E=None)
