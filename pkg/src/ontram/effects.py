"""Counterfactual predictions by toggling the treatment indicator, ITE/ATE
summaries and odds-ratio reporting.

Sign conventions: ``ite = P(favorable | t=1) - P(favorable | t=0)``, so a
positive ITE means treatment helps. A coefficient ``beta_p`` shifts mass to
higher (worse) classes, so ``exp(beta_p)`` is the odds ratio for a higher
class and a protective treatment has ``beta_t < 0``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ModelParams, class_probabilities
from .errors import DataError, ShapeError


@dataclass(frozen=True, eq=False)
class CounterfactualPair:
    probs_treated: np.ndarray
    probs_control: np.ndarray
    favorable_cut: int

    @property
    def p_treated(self) -> np.ndarray:
        return self.probs_treated[:, : self.favorable_cut + 1].sum(axis=1)

    @property
    def p_control(self) -> np.ndarray:
        return self.probs_control[:, : self.favorable_cut + 1].sum(axis=1)

    @property
    def ite(self) -> np.ndarray:
        return self.p_treated - self.p_control


@dataclass(frozen=True)
class IteRecord:
    patient_id: str
    p_treated: float
    p_control: float
    ite: float
    treated: int
    favorable: int


def _toggled(params, X, value):
    if params.treatment_index is None:
        raise ShapeError("model has no treatment feature to toggle")
    X = np.array(X, dtype=np.float64, ndmin=2)
    X[:, params.treatment_index] = value
    return X


def counterfactual_predict(params: ModelParams, X, E=None) -> CounterfactualPair:
    """Class probabilities with the treatment entry set to 1 and to 0."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if E is not None:
        E = np.atleast_2d(E)
    return CounterfactualPair(
        np.atleast_2d(class_probabilities(params, _toggled(params, X, 1.0), E)),
        np.atleast_2d(class_probabilities(params, _toggled(params, X, 0.0), E)),
        params.scale.favorable_cut,
    )


def ite_table(params: ModelParams, design) -> list[IteRecord]:
    """One :class:`IteRecord` per row of a standardized design."""
    pair = counterfactual_predict(params, design.X, design.E)
    treated = design.X[:, params.treatment_index].astype(int)
    favorable = (np.asarray(design.y) <= params.scale.favorable_cut).astype(int)
    p1, p0 = pair.p_treated, pair.p_control
    return [
        IteRecord(str(pid), float(a), float(b), float(a - b), int(t), int(f))
        for pid, a, b, t, f in zip(design.ids, p1, p0, treated, favorable)
    ]


def records_to_arrays(records):
    """``(ids, ite, treated, favorable)`` arrays from IteRecords."""
    ids = np.array([r.patient_id for r in records], dtype=object)
    ite = np.array([r.ite for r in records], dtype=np.float64)
    treated = np.array([r.treated for r in records], dtype=np.int64)
    favorable = np.array([r.favorable for r in records], dtype=np.int64)
    return ids, ite, treated, favorable


def write_ite_csv(path, records):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "p_treated", "p_control", "ite", "treated", "favorable"])
        for r in records:
            w.writerow([r.patient_id, repr(r.p_treated), repr(r.p_control), repr(r.ite),
                        r.treated, r.favorable])


def _arms(treated, favorable):
    treated = np.asarray(treated).astype(bool)
    favorable = np.asarray(favorable).astype(bool)
    if treated.shape != favorable.shape:
        raise ShapeError("treated and favorable must have the same length")
    if treated.all() or not treated.any():
        raise DataError("both treatment arms must be non-empty")
    return treated, favorable


def ate_observed(treated, favorable) -> float:
    """Favorable rate among treated minus favorable rate among controls."""
    treated, favorable = _arms(treated, favorable)
    return float(favorable[treated].mean() - favorable[~treated].mean())


def ate_odds_ratio(treated, favorable) -> float:
    """Odds of a favorable outcome, treated over control, from the raw 2x2 table."""
    treated, favorable = _arms(treated, favorable)
    a = int((treated & favorable).sum())
    b = int((treated & ~favorable).sum())
    c = int((~treated & favorable).sum())
    d = int((~treated & ~favorable).sum())
    if min(a, b, c, d) == 0:
        raise DataError("a 2x2 cell is empty; continuity corrections are not supported")
    return (a / b) / (c / d)


def arms_from_counts(fav_treated, unfav_treated, fav_control, unfav_control):
    """Expand 2x2 counts into per-patient ``(treated, favorable)`` arrays."""
    treated = np.repeat([1, 1, 0, 0], [fav_treated, unfav_treated, fav_control, unfav_control])
    favorable = np.repeat([1, 0, 1, 0], [fav_treated, unfav_treated, fav_control, unfav_control])
    return treated, favorable


def ate_calibration(ite, treated, favorable) -> float:
    """Observed risk difference minus mean ITE; positive means the ATE is underestimated."""
    ite = np.asarray(ite, dtype=np.float64)
    if ite.shape != np.shape(treated):
        raise ShapeError("ITEs must cover the evaluation cohort")
    return ate_observed(treated, favorable) - float(ite.mean())


@dataclass(frozen=True)
class OddsRatioRow:
    feature: str
    log_odds: float
    odds_ratio: float


def odds_ratio_report(params: ModelParams) -> list[OddsRatioRow]:
    """``exp(beta_p)`` per feature; values above 1 favor higher (worse) classes.

    Continuous features were standardized, so their ratios are per SD;
    binary and dummy features are per level switch.
    """
    return [OddsRatioRow(name, float(b), float(np.exp(b)))
            for name, b in zip(params.feature_names, params.beta)]
