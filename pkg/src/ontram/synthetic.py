"""Synthetic randomized trials drawn from a known model, and brute-force
oracles used to cross-check the production code paths.

The oracles deliberately share no code with the modules they check: they
re-derive the model's likelihood, the AUC and the C-for-benefit from the
raw definitions.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .core import EmbeddingHead, ModelParams, OutcomeScale, raw_from_cutpoints
from .errors import ConfigError, ShapeError, UndefinedStatisticError
from .preprocessing import CohortTable, ColumnSpec, Design, FeatureSchema

DEFAULT_THETA = (-2.9, -2.0, -1.15, -0.2, 0.8, 1.8)
DEFAULT_BETA = (0.45, 0.6, -0.3, 0.25, 0.15, -0.1, 0.8, 0.4, -0.35, 0.3, 0.5)


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of a synthetic trial.

    Covariates are ``n_continuous`` standard normals followed by
    ``n_binary`` Bernoulli(``binary_prob``) indicators; ``beta`` holds their
    coefficients and ``beta_treatment`` the treatment coefficient.
    """

    n: int = 449
    scale: OutcomeScale = field(default_factory=OutcomeScale)
    theta: tuple = DEFAULT_THETA
    n_continuous: int = 6
    n_binary: int = 5
    binary_prob: float = 0.3
    beta: tuple = DEFAULT_BETA
    beta_treatment: float = -math.log(2.09)
    treatment_prob: float = 0.5
    d_emb: int = 0
    head: EmbeddingHead | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "theta", tuple(float(v) for v in self.theta))
        object.__setattr__(self, "beta", tuple(float(v) for v in self.beta))
        if self.n < 1:
            raise ConfigError(f"n must be positive, got {self.n}")
        if len(self.theta) != self.scale.n_cutpoints:
            raise ConfigError(f"need {self.scale.n_cutpoints} cut-points, got {len(self.theta)}")
        if any(b <= a for a, b in zip(self.theta, self.theta[1:])):
            raise ConfigError("cut-points must be strictly increasing")
        if len(self.beta) != self.n_continuous + self.n_binary:
            raise ConfigError("beta must have one entry per covariate")
        if not 0 < self.treatment_prob < 1 or not 0 <= self.binary_prob <= 1:
            raise ConfigError("probabilities must lie in (0, 1)")
        if self.head is not None and self.head.d_emb != self.d_emb:
            raise ConfigError("head input size differs from d_emb")

    @property
    def covariate_names(self) -> list[str]:
        return ([f"cont_{j + 1}" for j in range(self.n_continuous)]
                + [f"bin_{j + 1}" for j in range(self.n_binary)])

    def schema(self) -> FeatureSchema:
        cols = [ColumnSpec("patient_id", role="identifier")]
        cols += [ColumnSpec(c, "continuous") for c in self.covariate_names[: self.n_continuous]]
        cols += [ColumnSpec(c, "binary") for c in self.covariate_names[self.n_continuous:]]
        cols += [ColumnSpec("treatment", "binary", "treatment"),
                 ColumnSpec("mrs", "continuous", "outcome")]
        cols += [ColumnSpec(f"emb_{j}", "continuous", "embedding-block") for j in range(self.d_emb)]
        return FeatureSchema(tuple(cols), self.scale)

    def true_params(self) -> ModelParams:
        """The generating model in the unstandardized feature space."""
        names = [*self.covariate_names, "treatment"]
        return ModelParams(raw_from_cutpoints(self.theta), [*self.beta, self.beta_treatment],
                           names, len(names) - 1, self.scale, self.head)

    def to_dict(self):
        return {
            "n": self.n, "class_count": self.scale.class_count,
            "favorable_cut": self.scale.favorable_cut, "theta": list(self.theta),
            "n_continuous": self.n_continuous, "n_binary": self.n_binary,
            "binary_prob": self.binary_prob, "beta": list(self.beta),
            "beta_treatment": self.beta_treatment, "treatment_prob": self.treatment_prob,
            "d_emb": self.d_emb, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        scale = OutcomeScale(int(d.pop("class_count", 7)), int(d.pop("favorable_cut", 2)))
        try:
            spec = cls(scale=scale, **d)
        except TypeError as exc:
            raise ConfigError(f"bad simulation config: {exc}") from exc
        if spec.d_emb and spec.head is None:
            head = EmbeddingHead.initialize(spec.d_emb, np.random.default_rng([spec.seed, 7]),
                                            hidden=(16, 8), dropout=0.0)
            spec = cls(**{**spec.__dict__, "head": head})
        return spec


@dataclass(eq=False)
class SyntheticCohort:
    table: CohortTable
    p_treated: np.ndarray
    p_control: np.ndarray

    @property
    def ite(self) -> np.ndarray:
        return self.p_treated - self.p_control


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _draw_covariates(spec, rng, n):
    cont = rng.standard_normal((n, spec.n_continuous))
    binary = (rng.random((n, spec.n_binary)) < spec.binary_prob).astype(np.float64)
    return np.hstack([cont, binary])


def _true_shift(spec, C, t, E):
    s = C @ np.asarray(spec.beta) + spec.beta_treatment * t
    if spec.head is not None:
        s = s + spec.head.forward(E)[0]
    return s


def _favorable_truth(spec, C, E):
    theta_c = spec.theta[spec.scale.favorable_cut]
    p1 = _sigmoid(theta_c - _true_shift(spec, C, np.ones(len(C)), E))
    p0 = _sigmoid(theta_c - _true_shift(spec, C, np.zeros(len(C)), E))
    return p1, p0


def generate_rct(spec: GeneratorSpec) -> SyntheticCohort:
    """Draw covariates and arm, then the outcome through the latent variable.

    A standard-logistic ``z`` is drawn per patient and the outcome is the
    number of cut-points with ``theta_k - shift < z``; this realizes
    ``P(Y <= k) = F(theta_k - shift)``.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    C = _draw_covariates(spec, rng, n)
    t = (rng.random(n) < spec.treatment_prob).astype(np.float64)
    E = rng.standard_normal((n, spec.d_emb)) if spec.d_emb else None
    z = rng.logistic(size=n)
    s = _true_shift(spec, C, t, E)
    theta = np.asarray(spec.theta)
    y = (theta[None, :] - s[:, None] < z[:, None]).sum(axis=1).astype(np.int64)
    p1, p0 = _favorable_truth(spec, C, E)

    data = {name: C[:, j].copy() for j, name in enumerate(spec.covariate_names)}
    data["treatment"] = t.astype(np.int64)
    data["mrs"] = y
    ids = np.array([f"P{i:06d}" for i in range(n)], dtype=object)
    return SyntheticCohort(CohortTable(spec.schema(), data, ids, E), p1, p0)


def population_ate(spec: GeneratorSpec, n_mc=2_000_000, seed=12345, chunk=250_000):
    """Risk-difference ATE of the generating model by Monte Carlo over fresh covariates.

    Returns ``(estimate, standard_error)``.
    """
    rng = np.random.default_rng(seed)
    total, total_sq, done = 0.0, 0.0, 0
    while done < n_mc:
        m = min(chunk, n_mc - done)
        C = _draw_covariates(spec, rng, m)
        E = rng.standard_normal((m, spec.d_emb)) if spec.d_emb else None
        p1, p0 = _favorable_truth(spec, C, E)
        d = p1 - p0
        total += d.sum()
        total_sq += (d * d).sum()
        done += m
    mean = total / n_mc
    var = total_sq / n_mc - mean * mean
    return mean, math.sqrt(max(var, 0.0) / n_mc)


def raw_design(table: CohortTable) -> Design:
    """Unstandardized design (covariates in schema order, then treatment)."""
    schema = table.schema
    names = [c.name for c in schema.covariates]
    if any(c.kind == "categorical" for c in schema.covariates):
        raise ShapeError("raw_design supports continuous and binary covariates only")
    X = np.column_stack([table.data[c] for c in names] + [table.treatment.astype(float)])
    return Design(X, table.outcome.copy(), len(names), tuple(names + [schema.treatment]),
                  table.ids.copy(), table.embeddings)


def write_truth_csv(path, cohort: SyntheticCohort):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "p_treated_true", "p_control_true", "ite_true"])
        for pid, a, b in zip(cohort.table.ids, cohort.p_treated, cohort.p_control):
            w.writerow([pid, repr(float(a)), repr(float(b)), repr(float(a - b))])


# --------------------------------------------------------------------------
# oracles

def oracle_auc(scores, labels) -> float:
    """Literal double loop over positive/negative pairs."""
    pos = [float(s) for s, l in zip(scores, labels) if l == 1]
    neg = [float(s) for s, l in zip(scores, labels) if l == 0]
    if not pos or not neg:
        raise UndefinedStatisticError("AUC needs both classes")
    credit = 0.0
    for a in pos:
        for b in neg:
            if a > b:
                credit += 1.0
            elif a == b:
                credit += 0.5
    return credit / (len(pos) * len(neg))


def oracle_c_for_benefit(ids, ite, treated, favorable, truncation_seed=0) -> float:
    """Exhaustive pair-of-pairs enumeration in exact rational arithmetic.

    Matching: sort each arm by (ite, id), keep a seeded random subset of the
    larger arm (``default_rng(seed).choice(size, m, replace=False)``, sorted),
    pair by rank.
    """
    rows = list(zip((float(v) for v in ite), (str(i) for i in ids),
                    (int(t) for t in treated), (int(f) for f in favorable)))
    arm_t = sorted((r for r in rows if r[2] == 1), key=lambda r: (r[0], r[1]))
    arm_c = sorted((r for r in rows if r[2] == 0), key=lambda r: (r[0], r[1]))
    if len(arm_t) < 2 or len(arm_c) < 2:
        raise UndefinedStatisticError("need at least two patients per arm")
    m = min(len(arm_t), len(arm_c))
    if len(arm_t) != len(arm_c):
        big = arm_t if len(arm_t) > m else arm_c
        keep = sorted(int(k) for k in np.random.default_rng(truncation_seed).choice(
            len(big), size=m, replace=False))
        big = [big[k] for k in keep]
        if len(arm_t) > m:
            arm_t = big
        else:
            arm_c = big
    pairs = []
    for a, b in zip(arm_t, arm_c):
        pairs.append((Fraction(a[0]) + Fraction(b[0]), a[3] - b[3]))  # 2x mean keeps order
    concordant = Fraction(0)
    informative = 0
    for i in range(len(pairs)):
        for j in range(i + 1, len(pairs)):
            (pi, oi), (pj, oj) = pairs[i], pairs[j]
            if oi == oj:
                continue
            informative += 1
            if pi == pj:
                concordant += Fraction(1, 2)
            elif (pi > pj) == (oi > oj):
                concordant += 1
    if informative == 0:
        raise UndefinedStatisticError("no informative pair of pairs")
    return float(concordant / informative)


def oracle_nll_rows(arrays, X, y, E, class_count):
    """Per-row negative log-likelihood recomputed from raw parameter arrays.

    Evaluates the model in plain numpy with its own logistic function and
    head forward pass, without the production kernels.
    """
    gamma = np.asarray(arrays["gamma"], dtype=np.float64)
    theta = [float(gamma[0])]
    for g in gamma[1:]:
        theta.append(theta[-1] + math.exp(float(g)))
    s = np.asarray(X, dtype=np.float64) @ np.asarray(arrays["beta"], dtype=np.float64)
    if "W1" in arrays:
        h1 = np.maximum(np.asarray(E) @ arrays["W1"] + arrays["b1"], 0.0)
        h2 = np.maximum(h1 @ arrays["W2"] + arrays["b2"], 0.0)
        s = s + h2 @ arrays["w3"] + arrays["b3"][0]
    out = np.empty(len(s))
    for i, (si, k) in enumerate(zip(s, y)):
        upper = 1.0 if k == class_count - 1 else 1.0 / (1.0 + math.exp(-(theta[k] - si)))
        lower = 0.0 if k == 0 else 1.0 / (1.0 + math.exp(-(theta[k - 1] - si)))
        out[i] = -math.log(max(upper - lower, 1e-12))
    return out


def finite_difference_gradient(params: ModelParams, X, y, E=None, step=1e-5):
    """Central differences of the mean NLL for every coordinate of ``params.arrays()``."""
    base = params.arrays()
    K = params.scale.class_count
    y = np.asarray(y)
    grads = {}
    for key, arr in base.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus = dict(base)
            minus = dict(base)
            plus[key] = arr.copy()
            minus[key] = arr.copy()
            plus[key][idx] += step
            minus[key][idx] -= step
            f_plus = oracle_nll_rows(plus, X, y, E, K).mean()
            f_minus = oracle_nll_rows(minus, X, y, E, K).mean()
            g[idx] = (f_plus - f_minus) / (2.0 * step)
        grads[key] = g
    return grads
