"""Run configuration and the cross-validation / evaluation pipelines behind the CLI."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import favorable_probability
from .effects import (
    ate_observed,
    ate_odds_ratio,
    counterfactual_predict,
    odds_ratio_report,
)
from .errors import ConfigError, DataError, OntramError
from .metrics import (
    METRIC_NAMES,
    bootstrap_ci,
    descriptive_summary,
    evaluate_predictions,
    format_summary,
    roc_curve,
)
from .preprocessing import (
    CohortTable,
    FeatureSchema,
    StandardizerParams,
    apply_standardizer,
    fit_standardizer,
    ingest_csv,
    knn_impute,
    make_fold_plan,
)
from .serialization import (
    REPORT_FORMAT,
    REPORT_VERSION,
    check_alignment,
    dump_json,
    load_params,
    save_params,
)
from .training import STAGES, TrainConfig, default_stages, staged_fit, train

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
MODELS = ("clinical", "clinical+embeddings")


@dataclass
class RunConfig:
    """Everything a run needs; round-trips losslessly through :meth:`to_dict`."""

    schema: FeatureSchema
    input_csv: str | None = None
    embeddings_csv: str | None = None
    output_dir: str = "out"
    folds: int = 5
    val_fraction: float = 0.15
    impute_k: int = 5
    seeds: dict = field(default_factory=lambda: {"split": 0, "train": 0, "bootstrap": 0,
                                                 "truncation": 0})
    stages: dict = field(default_factory=default_stages)
    models: tuple = ("clinical",)
    bootstrap_B: int = 1000
    alpha: float = 0.05
    odds_ratio_B: int = 200
    odds_ratio_epochs: int = 200
    head_hidden: tuple = (256, 128)
    dropout: float = 0.3
    simulate: dict = field(default_factory=dict)

    def __post_init__(self):
        self.models = tuple(self.models)
        self.head_hidden = tuple(int(h) for h in self.head_hidden)
        for m in self.models:
            if m not in MODELS:
                raise ConfigError(f"unknown model {m!r}; choose from {MODELS}")
        for key in ("split", "train", "bootstrap", "truncation"):
            if not isinstance(self.seeds.get(key), int):
                raise ConfigError(f"seed {key!r} must be an explicit integer")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.bootstrap_B < 1 or self.odds_ratio_B < 0 or self.impute_k < 1:
            raise ConfigError("bootstrap_B and impute_k must be positive, odds_ratio_B >= 0")
        if len(self.head_hidden) != 2:
            raise ConfigError("head_hidden must list two layer sizes")

    def to_dict(self):
        return {
            "version": CONFIG_VERSION,
            "paths": {"input_csv": self.input_csv, "embeddings_csv": self.embeddings_csv,
                      "output_dir": self.output_dir},
            "schema": self.schema.to_dict(),
            "folds": self.folds,
            "val_fraction": self.val_fraction,
            "impute_k": self.impute_k,
            "seeds": dict(self.seeds),
            "stages": {k: v.to_dict() for k, v in self.stages.items()},
            "models": list(self.models),
            "bootstrap_B": self.bootstrap_B,
            "alpha": self.alpha,
            "odds_ratio_B": self.odds_ratio_B,
            "odds_ratio_epochs": self.odds_ratio_epochs,
            "head_hidden": list(self.head_hidden),
            "dropout": self.dropout,
            "simulate": copy.deepcopy(self.simulate),
        }

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d)
        version = d.pop("version", None)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
        if "schema" not in d:
            raise ConfigError("config needs a 'schema' section")
        paths = d.pop("paths", {}) or {}
        stages = default_stages()
        for name, sd in (d.pop("stages", {}) or {}).items():
            if name not in STAGES:
                raise ConfigError(f"unknown stage {name!r}")
            stages[name] = TrainConfig.from_dict({**stages[name].to_dict(), **sd, "stage": name})
        seeds = {"split": 0, "train": 0, "bootstrap": 0, "truncation": 0}
        seeds.update(d.pop("seeds", {}) or {})
        schema = FeatureSchema.from_dict(d.pop("schema"))
        known = {"folds", "val_fraction", "impute_k", "models", "bootstrap_B", "alpha",
                 "odds_ratio_B", "odds_ratio_epochs", "head_hidden", "dropout", "simulate"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(schema=schema, input_csv=paths.get("input_csv"),
                   embeddings_csv=paths.get("embeddings_csv"),
                   output_dir=paths.get("output_dir", "out"), seeds=seeds, stages=stages, **d)


def set_dotted(d: dict, dotted: str, value):
    """Assign ``value`` at a dotted path inside a nested dict, creating levels."""
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {k!r} is not a section")
    node[keys[-1]] = value


# --------------------------------------------------------------------------
# shared helpers

def _write_csv(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return repr(float(v))


def _prepare(train_tab: CohortTable, others, impute_k):
    """Impute and standardize with statistics from ``train_tab`` only."""
    train_imp = knn_impute(train_tab, impute_k)
    std = fit_standardizer(train_imp)
    designs = [apply_standardizer(std, train_imp)]
    for tab in others:
        designs.append(apply_standardizer(std, knn_impute(tab, impute_k, donors=train_tab)))
    return std, designs


def _report_config(cfg):
    # the output location is left out so a run tree is identical wherever it is written
    d = cfg.to_dict()
    d["paths"].pop("output_dir")
    return d


def _stage_configs(cfg: RunConfig, seed_offset: int):
    base = cfg.seeds["train"] + seed_offset
    return {name: TrainConfig.from_dict({**c.to_dict(), "seed": base + j})
            for j, (name, c) in enumerate(cfg.stages.items())}


@dataclass(eq=False)
class Predictions:
    ids: np.ndarray
    fold: np.ndarray
    outcome: np.ndarray
    treated: np.ndarray
    favorable: np.ndarray
    p_observed: np.ndarray
    p_treated: np.ndarray
    p_control: np.ndarray

    @property
    def ite(self):
        return self.p_treated - self.p_control

    @classmethod
    def concat(cls, parts):
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("ids", "fold", "outcome", "treated", "favorable", "p_observed",
                               "p_treated", "p_control")))

    def write(self, path):
        _write_csv(path, ["patient_id", "fold", "outcome", "treated", "favorable",
                          "p_favorable", "p_treated", "p_control", "ite"],
                   [[i, int(f), int(o), int(t), int(fv), _fmt(p), _fmt(a), _fmt(b), _fmt(a - b)]
                    for i, f, o, t, fv, p, a, b in zip(
                        self.ids, self.fold, self.outcome, self.treated, self.favorable,
                        self.p_observed, self.p_treated, self.p_control)])


def predict(params, design, fold=0) -> Predictions:
    pair = counterfactual_predict(params, design.X, design.E)
    fav_cut = params.scale.favorable_cut
    return Predictions(
        design.ids, np.full(design.n_rows, fold), design.y.copy(), design.treated,
        (design.y <= fav_cut).astype(np.int64),
        np.atleast_1d(favorable_probability(params, design.X, design.E)),
        pair.p_treated, pair.p_control,
    )


def score(pred: Predictions, cfg: RunConfig):
    return evaluate_predictions(pred.p_observed, pred.favorable, pred.ite, pred.treated,
                                pred.ids, B=cfg.bootstrap_B, alpha=cfg.alpha,
                                seed=cfg.seeds["bootstrap"],
                                truncation_seed=cfg.seeds["truncation"])


def odds_ratio_table(params, design, cfg: RunConfig):
    """Per-feature odds ratios with basic-bootstrap CIs from warm-started refits.

    Each replicate refits the cut-points and linear coefficients on a
    patient-level resample for ``odds_ratio_epochs`` epochs, starting from
    ``params``; an embedding head, if present, is held fixed.
    """
    rows = odds_ratio_report(params)
    point = np.array([r.log_odds for r in rows])
    if cfg.odds_ratio_B == 0:
        return [{"feature": r.feature, "odds_ratio": r.odds_ratio, "lower": None, "upper": None}
                for r in rows]
    stage = cfg.stages["clinical"]
    refit_cfg = TrainConfig("clinical", cfg.odds_ratio_epochs, stage.batch_size,
                            stage.learning_rate, 0.0, False, cfg.seeds["train"],
                            ("cutpoints", "linear"))
    idx = np.arange(design.n_rows)

    def refit(rows_):
        return train(params, design.take(rows_), refit_cfg).params.beta

    res = bootstrap_ci(refit, idx, B=cfg.odds_ratio_B, alpha=cfg.alpha,
                       seed=cfg.seeds["bootstrap"] + 1)
    lower, upper = np.exp(res.lower), np.exp(res.upper)
    return [{"feature": r.feature, "odds_ratio": float(np.exp(p)), "lower": float(lo),
             "upper": float(hi)} for r, p, lo, hi in zip(rows, point, lower, upper)]


# --------------------------------------------------------------------------
# cross-validation

def load_cohort(cfg: RunConfig) -> CohortTable:
    if cfg.input_csv is None:
        raise ConfigError("config has no input_csv")
    for p in (cfg.input_csv, cfg.embeddings_csv):
        if p is not None and not Path(p).exists():
            raise ConfigError(f"input path does not exist: {p}")
    return ingest_csv(cfg.input_csv, cfg.schema, cfg.embeddings_csv)


def run_cv(cfg: RunConfig, out_dir=None):
    """Full cross-validation; writes the output tree and returns the report dict."""
    out = Path(out_dir or cfg.output_dir)
    table = load_cohort(cfg)
    models = list(cfg.models)
    if "clinical+embeddings" in models and table.embeddings is None:
        raise ConfigError("model 'clinical+embeddings' needs embedding columns or embeddings_csv")
    scale = cfg.schema.scale
    plan = make_fold_plan(table.outcome, scale, cfg.folds, cfg.seeds["split"], cfg.val_fraction)

    out.mkdir(parents=True, exist_ok=True)
    (out / "plots").mkdir(exist_ok=True)
    # val_j marks the rows held out for validation while fold j is the test fold
    _write_csv(out / "folds.csv",
               ["patient_id", "outcome", "favorable", "fold",
                *(f"val_{j}" for j in range(1, plan.n_folds + 1))],
               [[pid, int(y), int(f), int(k), *(int(v) for v in plan.validation[:, i])]
                for i, (pid, y, f, k) in enumerate(zip(table.ids, table.outcome,
                                                       table.favorable, plan.fold))])
    header, rows = descriptive_summary(table)
    (out / "descriptive.tsv").write_text(format_summary(header, rows), encoding="utf-8")

    report = {"format": REPORT_FORMAT, "version": REPORT_VERSION, "config": _report_config(cfg),
              "strata": plan.strata, "models": {}}
    first_error = None
    or_rows = []
    for model in models:
        use_emb = model == "clinical+embeddings"
        fold_preds, fold_reports = [], {}
        for i in range(1, plan.n_folds + 1):
            fold_dir = out / f"fold_{i}" / model.replace("+", "_")
            fold_dir.mkdir(parents=True, exist_ok=True)
            try:
                pred = _run_fold(cfg, table, plan, i, use_emb, fold_dir)
                fold_preds.append(pred)
                fold_reports[str(i)] = score(pred, cfg)
            except OntramError as exc:
                log.error("fold %d (%s) failed: %s", i, model, exc)
                fold_reports[str(i)] = {"error": f"{type(exc).__name__}: {exc}"}
                first_error = first_error or exc
        entry = {"folds": fold_reports}
        if fold_preds:
            pooled = Predictions.concat(fold_preds)
            entry["pooled"] = score(pooled, cfg)
            entry["n_test"] = int(pooled.ids.size)
            entry["ate_observed"] = ate_observed(pooled.treated, pooled.favorable)
            try:
                entry["ate_odds_ratio"] = ate_odds_ratio(pooled.treated, pooled.favorable)
            except DataError:
                entry["ate_odds_ratio"] = None
            fpr, tpr, thr = roc_curve(pooled.p_observed, pooled.favorable)
            tag = model.replace("+", "_")
            _write_csv(out / "plots" / f"roc_{tag}.csv", ["fpr", "tpr", "threshold"],
                       [[_fmt(a), _fmt(b), _fmt(c)] for a, b, c in zip(fpr, tpr, thr)])
            _write_csv(out / "plots" / f"ite_{tag}.csv",
                       ["patient_id", "p_treated", "p_control", "ite", "treated", "favorable"],
                       [[i_, _fmt(a), _fmt(b), _fmt(a - b), int(t), int(f)]
                        for i_, a, b, t, f in zip(pooled.ids, pooled.p_treated, pooled.p_control,
                                                  pooled.treated, pooled.favorable)])
        try:
            entry["odds_ratios"] = _full_cohort_odds_ratios(cfg, table, use_emb, out / model_dir(model))
            or_rows += [[model, r["feature"], _fmt(r["odds_ratio"]),
                         "" if r["lower"] is None else _fmt(r["lower"]),
                         "" if r["upper"] is None else _fmt(r["upper"])]
                        for r in entry["odds_ratios"]]
        except OntramError as exc:
            log.error("full-cohort fit (%s) failed: %s", model, exc)
            entry["odds_ratios"] = {"error": f"{type(exc).__name__}: {exc}"}
            first_error = first_error or exc
        report["models"][model] = entry
    _write_csv(out / "plots" / "odds_ratios.csv", ["model", "feature", "odds_ratio", "lower", "upper"],
               or_rows)
    dump_json(report, out / "report.json")
    return report, first_error


def model_dir(model):
    return f"full_{model.replace('+', '_')}"


def _run_fold(cfg, table, plan, i, use_emb, fold_dir) -> Predictions:
    tr, va, te = (table.take(plan.train_rows(i)), table.take(plan.val_rows(i)),
                  table.take(plan.test_rows(i)))
    std, (d_tr, d_va, d_te) = _prepare(tr, [va, te], cfg.impute_k)
    if not use_emb:
        d_tr, d_va, d_te = (_drop_emb(d) for d in (d_tr, d_va, d_te))
    result = staged_fit(d_tr, cfg.schema.scale, _stage_configs(cfg, 100 * i), d_va,
                        seed=cfg.seeds["train"] + i, hidden=cfg.head_hidden, dropout=cfg.dropout)
    save_params(fold_dir / "params.json", result.params, _preprocessing_dict(cfg, std))
    dump_json({k: t.to_dict() for k, t in result.traces.items()}, fold_dir / "trace.json")
    pred = predict(result.params, d_te, fold=i)
    pred.write(fold_dir / "predictions.csv")
    return pred


def _full_cohort_odds_ratios(cfg, table, use_emb, out_dir):
    std, (design,) = _prepare(table, [], cfg.impute_k)
    if not use_emb:
        design = _drop_emb(design)
    result = staged_fit(design, cfg.schema.scale, _stage_configs(cfg, 0), None,
                        seed=cfg.seeds["train"], hidden=cfg.head_hidden, dropout=cfg.dropout)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_params(out_dir / "params.json", result.params, _preprocessing_dict(cfg, std))
    return odds_ratio_table(result.params, design, cfg)


def _drop_emb(design):
    return replace(design, E=None)


def _preprocessing_dict(cfg, std: StandardizerParams):
    return {"schema": cfg.schema.to_dict(), "standardizer": std.to_dict(),
            "impute_k": cfg.impute_k}


# --------------------------------------------------------------------------
# evaluation of a saved model

def run_evaluate(cfg: RunConfig, params_path, out_path=None):
    """Score a cohort with a saved model; same report schema as :func:`run_cv`."""
    params, prep = load_params(params_path)
    if prep is None:
        raise ConfigError("parameter file lacks preprocessing information")
    schema = FeatureSchema.from_dict(prep["schema"])
    cfg = copy.copy(cfg)
    cfg.schema = schema
    table = load_cohort(cfg)
    std = StandardizerParams.from_dict(prep["standardizer"])
    if table.has_missing():
        table = knn_impute(table, int(prep.get("impute_k", cfg.impute_k)))
    design = apply_standardizer(std, table)
    check_alignment(params, design.feature_names)
    if params.head is None:
        design = _drop_emb(design)
    elif design.E is None:
        raise DataError("the saved model has an embedding head but the cohort has no embeddings")
    pred = predict(params, design)
    entry = {
        "pooled": score(pred, cfg),
        "n_test": int(pred.ids.size),
        "ate_observed": ate_observed(pred.treated, pred.favorable),
        "odds_ratios": [{"feature": r.feature, "odds_ratio": r.odds_ratio, "lower": None,
                         "upper": None} for r in odds_ratio_report(params)],
    }
    report = {"format": REPORT_FORMAT, "version": REPORT_VERSION, "config": _report_config(cfg),
              "params_file": str(params_path), "models": {"evaluated": entry}}
    if out_path is not None:
        dump_json(report, out_path)
    return report


# --------------------------------------------------------------------------
# report comparison

_HIGHER_IS_BETTER = {"auc": True, "c_for_benefit": True, "nll": False, "brier": False}
_LABELS = {"nll": "NLL", "auc": "AUC", "brier": "Brier", "c_for_benefit": "C-ben",
           "ate_minus_mean_ite": "ATE-meanITE"}


def compare_reports(reports: list[tuple[str, dict]]):
    """Rows = metrics, columns = (report, model); returns ``(text, forest_rows)``."""
    columns = []
    for name, rep in reports:
        if rep.get("format") != REPORT_FORMAT or rep.get("version") != REPORT_VERSION:
            raise ConfigError(f"{name}: unsupported report schema version {rep.get('version')!r}")
        for model, entry in rep["models"].items():
            if "pooled" in entry:
                label = model if len(reports) == 1 else f"{name}:{model}"
                columns.append((label, entry))
    if not columns:
        raise ConfigError("no pooled results in the given reports")
    lines = ["\t".join(["metric", *(c[0] for c in columns)])]
    for m in METRIC_NAMES:
        vals = [c[1]["pooled"][m] for c in columns]
        best = None
        if len(columns) > 1:
            pts = [v["point"] for v in vals]
            if m in _HIGHER_IS_BETTER:
                pick = max if _HIGHER_IS_BETTER[m] else min
                best = pts.index(pick(pts))
            else:
                best = [abs(p) for p in pts].index(min(abs(p) for p in pts))
        cells = []
        for j, v in enumerate(vals):
            cell = f"{v['point']:.3f} [{v['lower']:.3f}, {v['upper']:.3f}]"
            cells.append(cell + (" *" if j == best else ""))
        lines.append("\t".join([_LABELS[m], *cells]))
    forest = []
    for label, entry in columns:
        ors = entry.get("odds_ratios")
        if isinstance(ors, list):
            for r in ors:
                forest.append([label, r["feature"], r["odds_ratio"], r["lower"], r["upper"]])
    return "\n".join(lines) + "\n", forest
