"""Discrimination and calibration metrics for favorable-outcome prediction
and ITE estimation, basic-bootstrap confidence intervals and descriptive
cohort summaries.

Quantiles everywhere use linear interpolation between order statistics at
position ``p * (n - 1)`` (0-based), i.e. numpy's default ``"linear"`` rule.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .effects import ate_calibration, records_to_arrays
from .errors import DataError, DomainError, ShapeError, UndefinedStatisticError

NLL_CLAMP = 1e-12


def _binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError("scores and labels differ in length")
    if scores.size == 0:
        raise DomainError("metrics need at least one observation")
    if not np.all((labels == 0) | (labels == 1)):
        raise DomainError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores across classes count one half.

    Computed from mid-ranks in integer arithmetic (ranks doubled), so the
    result is the exact pair count divided by ``n_pos * n_neg``.
    """
    scores, labels = _binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedStatisticError("AUC needs both classes")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    # doubled mid-rank of each distinct value: 2*start + count + 1
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    twice_rank = (2 * starts + counts + 1)[inverse]
    u2 = int(twice_rank[labels == 1].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def roc_curve(scores, labels):
    """``(fpr, tpr, thresholds)`` at every distinct score, highest first."""
    scores, labels = _binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(l)[last]
    fp = (last + 1) - tp
    n_pos, n_neg = labels.sum(), labels.size - labels.sum()
    tpr = np.r_[0.0, tp / n_pos] if n_pos else np.r_[0.0, np.zeros(last.size)]
    fpr = np.r_[0.0, fp / n_neg] if n_neg else np.r_[0.0, np.zeros(last.size)]
    return fpr, tpr, np.r_[np.inf, s[last]]


def brier(scores, labels) -> float:
    scores, labels = _binary(scores, labels)
    return float(np.mean((scores - labels) ** 2))


def test_binary_nll(scores, labels) -> float:
    """Mean Bernoulli NLL with probabilities clamped to ``[1e-12, 1 - 1e-12]``."""
    scores, labels = _binary(scores, labels)
    p = np.clip(scores, NLL_CLAMP, 1.0 - NLL_CLAMP)
    return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log1p(-p)))


test_binary_nll.__test__ = False  # not a pytest test despite the name


# --------------------------------------------------------------------------
# C-for-benefit

def match_pairs(ids, ite, treated, favorable, seed=0):
    """Rank-matched treated/control pairs.

    Each arm is sorted by predicted ITE (ties by patient id); the larger arm
    is cut down to the smaller one's size by keeping a seeded uniform random
    subset (order preserved); then the k-th treated is paired with the k-th
    control. Returns ``(predicted_benefit, observed_benefit)`` per pair.
    """
    ids = np.asarray(ids, dtype=object)
    ite = np.asarray(ite, dtype=np.float64)
    treated = np.asarray(treated).astype(bool)
    favorable = np.asarray(favorable).astype(np.int64)
    if not (ids.shape == ite.shape == treated.shape == favorable.shape):
        raise ShapeError("ids, ite, treated and favorable must align")

    def ranked(mask):
        rows = np.flatnonzero(mask)
        return np.array(sorted(rows, key=lambda r: (ite[r], str(ids[r]))), dtype=np.int64)

    t_rows, c_rows = ranked(treated), ranked(~treated)
    if t_rows.size < 2 or c_rows.size < 2:
        raise UndefinedStatisticError("C-for-benefit needs at least two patients per arm")
    m = min(t_rows.size, c_rows.size)
    rng = np.random.default_rng(seed)
    if t_rows.size > m:
        t_rows = t_rows[np.sort(rng.choice(t_rows.size, size=m, replace=False))]
    elif c_rows.size > m:
        c_rows = c_rows[np.sort(rng.choice(c_rows.size, size=m, replace=False))]
    predicted = (ite[t_rows] + ite[c_rows]) / 2.0
    observed = favorable[t_rows] - favorable[c_rows]
    return predicted, observed


def c_for_benefit_arrays(ids, ite, treated, favorable, seed=0) -> float:
    predicted, observed = match_pairs(ids, ite, treated, favorable, seed)
    credit, informative = kernels.pair_concordance(predicted, observed.astype(np.float64))
    if informative == 0:
        raise UndefinedStatisticError("no two matched pairs differ in observed benefit")
    return credit / informative


def c_for_benefit(records, seed=0) -> float:
    """Concordance between predicted and observed benefit over matched pairs.

    Over all pairs-of-pairs with different observed benefit, the fraction in
    which the pair with the larger observed benefit also has the larger
    predicted benefit; predicted ties count one half.
    """
    return c_for_benefit_arrays(*records_to_arrays(records), seed=seed)


# --------------------------------------------------------------------------
# bootstrap

@dataclass(frozen=True, eq=False)
class BootstrapResult:
    point: np.ndarray | float
    lower: np.ndarray | float
    upper: np.ndarray | float
    replicates: np.ndarray
    redraws: int


def bootstrap_indices(n, seed, b):
    """Generator for replicate ``b``; its first draw is the resample used when defined."""
    return np.random.default_rng([seed, b])


def _as_tuple(data):
    if isinstance(data, tuple):
        return data
    return (data,)


def _replicate(statistic, data, n, seed, b, cap):
    rng = bootstrap_indices(n, seed, b)
    redraws = 0
    while True:
        idx = rng.integers(0, n, size=n)
        try:
            return np.asarray(statistic(*(d[idx] for d in data)), dtype=np.float64), redraws
        except UndefinedStatisticError:
            redraws += 1
            if redraws > cap:
                raise UndefinedStatisticError(
                    f"statistic undefined on more than {cap} resamples") from None


def bootstrap_ci(statistic, data, B=1000, alpha=0.05, seed=0, n_jobs=1) -> BootstrapResult:
    """Basic bootstrap interval ``[2*t - q(1-alpha/2), 2*t - q(alpha/2)]``.

    ``data`` is an array or a tuple of equally long arrays resampled jointly
    by row. Replicate ``b`` draws from its own stream seeded by
    ``(seed, b)``, so results do not depend on ``n_jobs``. Resamples on
    which ``statistic`` raises :class:`UndefinedStatisticError` are redrawn;
    more than ``0.1 * B`` redraws in total is an error. ``statistic`` may
    return a scalar or a vector.
    """
    data = tuple(np.asarray(d) if not isinstance(d, np.ndarray) else d for d in _as_tuple(data))
    n = len(data[0])
    if any(len(d) != n for d in data):
        raise ShapeError("bootstrap data arrays differ in length")
    if B < 1:
        raise DomainError("B must be positive")
    point = np.asarray(statistic(*data), dtype=np.float64)
    cap = max(1, math.floor(0.1 * B))

    def run(bs):
        return [_replicate(statistic, data, n, seed, b, cap) for b in bs]

    if n_jobs == 1:
        results = run(range(B))
    else:
        chunks = [range(i, B, n_jobs) for i in range(n_jobs)]
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(run, chunks))
        results = [None] * B
        for i, part in enumerate(parts):
            for j, r in enumerate(part):
                results[i + j * n_jobs] = r
    redraws = sum(r[1] for r in results)
    if redraws > cap:
        raise UndefinedStatisticError(f"{redraws} undefined resamples exceed 10% of B={B}")
    reps = np.stack([r[0] for r in results])
    q_lo, q_hi = np.quantile(reps, [alpha / 2, 1 - alpha / 2], axis=0, method="linear")
    lower, upper = 2 * point - q_hi, 2 * point - q_lo
    if point.ndim == 0:
        point, lower, upper = float(point), float(lower), float(upper)
    return BootstrapResult(point, lower, upper, reps, redraws)


# --------------------------------------------------------------------------
# bundled evaluation

METRIC_NAMES = ("nll", "auc", "brier", "c_for_benefit", "ate_minus_mean_ite")


def metric_vector(scores, favorable, ite, treated, ids, seed=0):
    """All report metrics on one (re)sample, in ``METRIC_NAMES`` order."""
    try:
        ate_gap = ate_calibration(ite, treated, favorable)
    except DataError as exc:
        raise UndefinedStatisticError(str(exc)) from None
    return np.array([
        test_binary_nll(scores, favorable),
        roc_auc(scores, favorable),
        brier(scores, favorable),
        c_for_benefit_arrays(ids, ite, treated, favorable, seed),
        ate_gap,
    ])


def evaluate_predictions(scores, favorable, ite, treated, ids, B=1000, alpha=0.05,
                         seed=0, truncation_seed=0, n_jobs=1):
    """Point estimates and basic-bootstrap CIs for every report metric."""
    res = bootstrap_ci(
        lambda s, f, i, t, p: metric_vector(s, f, i, t, p, truncation_seed),
        (np.asarray(scores, float), np.asarray(favorable), np.asarray(ite, float),
         np.asarray(treated), np.asarray(ids, dtype=object)),
        B=B, alpha=alpha, seed=seed, n_jobs=n_jobs,
    )
    return {
        name: {"point": float(res.point[j]), "lower": float(res.lower[j]),
               "upper": float(res.upper[j])}
        for j, name in enumerate(METRIC_NAMES)
    }


# --------------------------------------------------------------------------
# descriptive statistics

@dataclass(frozen=True)
class SummaryRow:
    label: str
    kind: str  # "median_iqr" or "count_pct"
    cells: tuple  # one (a, b, c) or (count, pct) tuple per group


def _fmt_num(v):
    return f"{v:.6g}" if abs(v) >= 1e-4 or v == 0 else f"{v:.3e}"


def _median_iqr(values):
    values = values[~np.isnan(values)]
    if values.size == 0:
        return (math.nan, math.nan, math.nan)
    q1, med, q3 = np.quantile(values, [0.25, 0.5, 0.75], method="linear")
    return (float(med), float(q1), float(q3))


def _count_pct(mask, valid):
    n = int(valid.sum())
    c = int((mask & valid).sum())
    return (c, 100.0 * c / n if n else math.nan)


def descriptive_summary(table):
    """Cohort summary grouped by outcome: columns Unfavorable, Favorable, All.

    Continuous covariates get median [Q1, Q3]; binary ones (and the
    treatment) the count and percent of ones; categorical ones one row per
    level. Missing cells are left out of their column's denominators.
    """
    fav = table.favorable.astype(bool)
    if fav.all() or not fav.any():
        raise DataError("descriptive summary needs both outcome groups")
    groups = {"Unfavorable": ~fav, "Favorable": fav, "All": np.ones_like(fav)}
    rows = []
    for spec in table.schema.columns:
        if spec.role not in ("covariate", "treatment"):
            continue
        col = table.data[spec.name]
        if spec.kind == "continuous":
            cells = tuple(_median_iqr(col[g]) for g in groups.values())
            rows.append(SummaryRow(spec.name, "median_iqr", cells))
        elif spec.kind == "binary" or spec.role == "treatment":
            valid = ~np.isnan(col.astype(float))
            cells = tuple(_count_pct((col == 1) & g, valid & g) for g in groups.values())
            rows.append(SummaryRow(f"{spec.name} (yes)", "count_pct", cells))
        else:
            valid = np.array([v is not None for v in col])
            for lvl in spec.levels:
                is_lvl = np.array([v == lvl for v in col])
                cells = tuple(_count_pct(is_lvl & g, valid & g) for g in groups.values())
                rows.append(SummaryRow(f"{spec.name}={lvl}", "count_pct", cells))
    header = [f"{name} (n={int(g.sum())})" for name, g in groups.items()]
    return header, rows


def format_summary(header, rows) -> str:
    lines = ["\t".join(["Variable", *header])]
    for r in rows:
        if r.kind == "median_iqr":
            cells = [f"{_fmt_num(m)} [{_fmt_num(a)}, {_fmt_num(b)}]" for m, a, b in r.cells]
        else:
            cells = [f"{c} ({p:.1f})" for c, p in r.cells]
        lines.append("\t".join([r.label, *cells]))
    return "\n".join(lines) + "\n"
