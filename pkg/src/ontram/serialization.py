"""Versioned JSON formats for model parameters and evaluation reports."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import HEAD_KEYS, EmbeddingHead, ModelParams, OutcomeScale
from .errors import AlignmentError, ConfigError

PARAMS_FORMAT = "ontram-params"
PARAMS_VERSION = 1
REPORT_FORMAT = "ontram-report"
REPORT_VERSION = 1


def params_to_dict(params: ModelParams, preprocessing=None) -> dict:
    d = {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "class_count": params.scale.class_count,
        "favorable_cut": params.scale.favorable_cut,
        "feature_names": list(params.feature_names),
        "treatment_index": params.treatment_index,
        "gamma": params.gamma.tolist(),
        "beta": params.beta.tolist(),
        "theta": params.theta.tolist(),
        "head": None,
    }
    if params.head is not None:
        d["head"] = {k: getattr(params.head, k).tolist() for k in HEAD_KEYS}
        d["head"]["dropout"] = params.head.dropout
    if preprocessing is not None:
        d["preprocessing"] = preprocessing
    return d


def params_from_dict(d) -> ModelParams:
    if d.get("format") != PARAMS_FORMAT:
        raise ConfigError("not a parameter file")
    if d.get("version") != PARAMS_VERSION:
        raise ConfigError(f"unsupported parameter file version {d.get('version')!r}")
    head = None
    if d.get("head") is not None:
        h = d["head"]
        head = EmbeddingHead(**{k: np.asarray(h[k], dtype=np.float64) for k in HEAD_KEYS},
                             dropout=float(h.get("dropout", 0.3)))
    return ModelParams(
        np.asarray(d["gamma"], dtype=np.float64),
        np.asarray(d["beta"], dtype=np.float64),
        tuple(d["feature_names"]),
        d["treatment_index"],
        OutcomeScale(int(d["class_count"]), int(d["favorable_cut"])),
        head,
    )


def dump_json(obj, path):
    text = json.dumps(obj, indent=2, allow_nan=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def load_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def save_params(path, params, preprocessing=None):
    dump_json(params_to_dict(params, preprocessing), path)


def load_params(path):
    """Return ``(params, preprocessing_dict_or_None)``."""
    d = load_json(path)
    return params_from_dict(d), d.get("preprocessing")


def check_alignment(params: ModelParams, feature_names):
    feature_names = tuple(feature_names)
    if params.feature_names != feature_names:
        missing = [f for f in params.feature_names if f not in feature_names]
        extra = [f for f in feature_names if f not in params.feature_names]
        raise AlignmentError(
            "feature names do not align with the saved model"
            + (f"; missing {missing}" if missing else "")
            + (f"; unexpected {extra}" if extra else "")
            + ("; order differs" if not missing and not extra else "")
        )
