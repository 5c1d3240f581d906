"""Tabular ingestion, k-NN imputation, standardization/dummy encoding and
stratified cross-validation splits.

Every fitted artifact (imputation donors, means, SDs, dummy layout) comes
from the training partition only; held-out rows are transformed, never
fitted on.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .core import OutcomeScale
from .errors import ConfigError, FitError, ImputationError, IngestionError, SplitError

KINDS = ("continuous", "binary", "categorical")
ROLES = ("covariate", "treatment", "outcome", "embedding-block", "identifier")
_TRUE = {"1", "1.0", "true", "yes"}
_FALSE = {"0", "0.0", "false", "no"}


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = "continuous"
    role: str = "covariate"
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        if self.kind not in KINDS:
            raise ConfigError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise ConfigError(f"column {self.name!r}: unknown role {self.role!r}")
        if self.kind == "categorical" and len(self.levels) < 2:
            raise ConfigError(f"categorical column {self.name!r} needs at least two levels")

    def to_dict(self):
        d = {"name": self.name, "kind": self.kind, "role": self.role}
        if self.levels:
            d["levels"] = list(self.levels)
        return d


@dataclass(frozen=True)
class FeatureSchema:
    """Column declarations plus the outcome scale.

    Exactly one binary treatment column and one outcome column; embedding
    columns, if any, are continuous and contiguous.
    """

    columns: tuple[ColumnSpec, ...]
    scale: OutcomeScale = field(default_factory=OutcomeScale)

    def __post_init__(self):
        cols = tuple(self.columns)
        object.__setattr__(self, "columns", cols)
        names = [c.name for c in cols]
        if len(set(names)) != len(names):
            raise ConfigError("column names must be unique")
        treat = [c for c in cols if c.role == "treatment"]
        if len(treat) != 1 or treat[0].kind != "binary":
            raise ConfigError("schema needs exactly one binary treatment column")
        if sum(c.role == "outcome" for c in cols) != 1:
            raise ConfigError("schema needs exactly one outcome column")
        if sum(c.role == "identifier" for c in cols) > 1:
            raise ConfigError("schema allows at most one identifier column")
        emb = [i for i, c in enumerate(cols) if c.role == "embedding-block"]
        if emb:
            if emb != list(range(emb[0], emb[0] + len(emb))):
                raise ConfigError("embedding-block columns must be contiguous")
            if any(cols[i].kind != "continuous" for i in emb):
                raise ConfigError("embedding-block columns must be continuous")

    def _by_role(self, role):
        return [c for c in self.columns if c.role == role]

    @property
    def treatment(self) -> str:
        return self._by_role("treatment")[0].name

    @property
    def outcome(self) -> str:
        return self._by_role("outcome")[0].name

    @property
    def identifier(self) -> str | None:
        ids = self._by_role("identifier")
        return ids[0].name if ids else None

    @property
    def covariates(self) -> list[ColumnSpec]:
        return self._by_role("covariate")

    @property
    def embedding_columns(self) -> list[str]:
        return [c.name for c in self._by_role("embedding-block")]

    def spec(self, name) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {
            "class_count": self.scale.class_count,
            "favorable_cut": self.scale.favorable_cut,
            "columns": [c.to_dict() for c in self.columns],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            scale = OutcomeScale(int(d.get("class_count", 7)), int(d.get("favorable_cut", 2)))
            columns = []
            for c in d["columns"]:
                if c.get("role") == "embedding-block" and "dim" in c:
                    prefix = c.get("prefix", "emb_")
                    columns += [ColumnSpec(f"{prefix}{j}", "continuous", "embedding-block")
                                for j in range(int(c["dim"]))]
                    continue
                columns.append(ColumnSpec(c["name"], c.get("kind", "continuous"),
                                          c.get("role", "covariate"), tuple(c.get("levels", ()))))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed schema: {exc}") from exc
        return cls(tuple(columns), scale)


@dataclass(eq=False)
class CohortTable:
    """Patient rows typed according to a schema.

    Continuous and binary covariates are float arrays with NaN for missing;
    categorical ones are object arrays with ``None`` for missing. Treatment
    and outcome are int arrays and never missing.
    """

    schema: FeatureSchema
    data: dict[str, np.ndarray]
    ids: np.ndarray
    embeddings: np.ndarray | None = None

    @property
    def n_rows(self) -> int:
        return len(self.ids)

    @property
    def treatment(self) -> np.ndarray:
        return self.data[self.schema.treatment]

    @property
    def outcome(self) -> np.ndarray:
        return self.data[self.schema.outcome]

    @property
    def favorable(self) -> np.ndarray:
        return (self.outcome <= self.schema.scale.favorable_cut).astype(np.int64)

    def missing(self, name) -> np.ndarray:
        col = self.data[name]
        if col.dtype == object:
            return np.array([v is None for v in col], dtype=bool)
        return np.isnan(col) if col.dtype.kind == "f" else np.zeros(len(col), dtype=bool)

    def has_missing(self) -> bool:
        return any(self.missing(c.name).any() for c in self.schema.covariates)

    def take(self, rows) -> CohortTable:
        rows = np.asarray(rows)
        return CohortTable(
            self.schema,
            {k: v[rows].copy() for k, v in self.data.items()},
            self.ids[rows].copy(),
            None if self.embeddings is None else self.embeddings[rows].copy(),
        )

    def with_embeddings(self, embeddings) -> CohortTable:
        return replace(self, embeddings=embeddings)


def _parse_cell(raw, spec, row):
    raw = raw.strip()
    if raw == "":
        return None
    if spec.kind == "continuous":
        try:
            v = float(raw)
        except ValueError:
            raise IngestionError(f"cannot parse {raw!r} as a number", row, spec.name) from None
        if not math.isfinite(v):
            raise IngestionError(f"non-finite value {raw!r}", row, spec.name)
        return v
    if spec.kind == "binary":
        low = raw.lower()
        if low in _TRUE:
            return 1.0
        if low in _FALSE:
            return 0.0
        raise IngestionError(f"binary cell must be 0/1, got {raw!r}", row, spec.name)
    if raw not in spec.levels:
        raise IngestionError(f"unknown level {raw!r}; expected one of {list(spec.levels)}",
                             row, spec.name)
    return raw


def ingest_csv(path, schema: FeatureSchema, embeddings_path=None) -> CohortTable:
    """Read a UTF-8 CSV with a header row; empty cells are missing.

    Embedding vectors come either from ``embedding-block`` columns in the
    same file or from a companion CSV keyed by the identifier column.
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        names = [c.name for c in schema.columns]
        for h in header:
            if h not in names:
                raise IngestionError("unknown column", 1, h)
        for n in names:
            if n not in header:
                raise IngestionError("column declared in schema is absent from the file", 1, n)
        pos = {h: i for i, h in enumerate(header)}
        raw_rows = [r for r in reader if any(cell.strip() for cell in r)]

    if not raw_rows:
        raise IngestionError(f"{path} has no data rows")
    K = schema.scale.class_count
    values = {c.name: [] for c in schema.columns}
    for lineno, r in enumerate(raw_rows, start=2):
        if len(r) != len(header):
            raise IngestionError(f"expected {len(header)} cells, got {len(r)}", lineno)
        for spec in schema.columns:
            cell = r[pos[spec.name]].strip()
            if spec.role == "identifier":
                if cell == "":
                    raise IngestionError("identifier is missing", lineno, spec.name)
                values[spec.name].append(cell)
                continue
            if spec.role == "outcome":
                if cell == "":
                    raise IngestionError("outcome is missing", lineno, spec.name)
                try:
                    v = float(cell)
                except ValueError:
                    raise IngestionError(f"cannot parse outcome {cell!r}", lineno,
                                         spec.name) from None
                if v != int(v) or not 0 <= v <= K - 1:
                    raise IngestionError(f"outcome {cell!r} outside valid range 0-{K - 1}",
                                         lineno, spec.name)
                values[spec.name].append(int(v))
                continue
            v = _parse_cell(cell, spec, lineno)
            if v is None and spec.role in ("treatment", "embedding-block"):
                raise IngestionError(f"{spec.role} value is missing", lineno, spec.name)
            values[spec.name].append(v)

    data = {}
    for spec in schema.columns:
        col = values[spec.name]
        if spec.role in ("identifier", "embedding-block"):
            continue
        if spec.role in ("treatment", "outcome"):
            data[spec.name] = np.asarray(col, dtype=np.int64)
        elif spec.kind == "categorical":
            data[spec.name] = np.array(col, dtype=object)
        else:
            data[spec.name] = np.array([np.nan if v is None else v for v in col], dtype=np.float64)

    if schema.identifier is not None:
        ids = np.array(values[schema.identifier], dtype=object)
        if len(set(ids)) != len(ids):
            raise IngestionError("identifiers are not unique", column=schema.identifier)
    else:
        ids = np.array([str(i) for i in range(len(raw_rows))], dtype=object)

    embeddings = None
    if schema.embedding_columns:
        embeddings = np.array([values[c] for c in schema.embedding_columns], dtype=np.float64).T
    if embeddings_path is not None:
        if embeddings is not None:
            raise IngestionError("embeddings given both inline and in a companion file")
        embeddings = read_embeddings_csv(embeddings_path, ids)
    return CohortTable(schema, data, ids, embeddings)


def read_embeddings_csv(path, ids) -> np.ndarray:
    """Companion embedding file: first column is the patient id, then ``emb_0 .. emb_{d-1}``."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IngestionError(f"cannot open {path}: {exc}") from exc
    if len(rows) < 2:
        raise IngestionError(f"{path} has no data rows")
    d = len(rows[0]) - 1
    by_id = {}
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != d + 1:
            raise IngestionError(f"expected {d + 1} cells, got {len(r)}", lineno)
        try:
            by_id[r[0].strip()] = [float(v) for v in r[1:]]
        except ValueError:
            raise IngestionError("unparseable embedding value", lineno) from None
    try:
        return np.array([by_id[str(i)] for i in ids], dtype=np.float64).reshape(len(ids), d)
    except KeyError as exc:
        raise IngestionError(f"no embedding for patient {exc.args[0]!r} in {path}") from None


def write_cohort_csv(path, table: CohortTable):
    """Inverse of :func:`ingest_csv` for inline embeddings (or none)."""
    schema = table.schema
    emb_cols = schema.embedding_columns
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c.name for c in schema.columns])
        for i in range(table.n_rows):
            row = []
            for spec in schema.columns:
                if spec.role == "identifier":
                    row.append(table.ids[i])
                elif spec.role == "embedding-block":
                    row.append(repr(float(table.embeddings[i, emb_cols.index(spec.name)])))
                elif spec.role in ("treatment", "outcome"):
                    row.append(str(int(table.data[spec.name][i])))
                else:
                    v = table.data[spec.name][i]
                    if v is None or (isinstance(v, float) and math.isnan(v)):
                        row.append("")
                    elif spec.kind == "binary":
                        row.append(str(int(v)))
                    elif spec.kind == "continuous":
                        row.append(repr(float(v)))
                    else:
                        row.append(str(v))
            w.writerow(row)


# --------------------------------------------------------------------------
# imputation

def knn_impute(table: CohortTable, k: int = 5, donors: CohortTable | None = None) -> CohortTable:
    """Fill missing covariates from the ``k`` nearest donor rows.

    ``donors`` is the fitting partition (defaults to ``table`` itself).
    Distance: Euclidean over the covariates observed in the target row,
    continuous ones standardized with donor statistics, binary and
    categorical ones contributing a 0/1 mismatch. A donor must have the
    target column and all distance columns observed. Continuous cells get
    the neighbor mean; binary and categorical cells the neighbor mode, ties
    broken towards the smallest value.
    """
    if k < 1:
        raise ImputationError(f"k must be positive, got {k}")
    if donors is None:
        donors = table
    specs = table.schema.covariates
    if not any(table.missing(s.name).any() for s in specs):
        return table

    d_missing = {s.name: donors.missing(s.name) for s in specs}
    for s in specs:
        if table.missing(s.name).any() and d_missing[s.name].all():
            raise ImputationError(f"column {s.name!r} is missing in every fitting row")

    # standardization of donor continuous columns for the distance
    center, spread = {}, {}
    for s in specs:
        if s.kind == "continuous":
            obs = donors.data[s.name][~d_missing[s.name]]
            center[s.name] = obs.mean() if obs.size else 0.0
            sd = obs.std() if obs.size else 0.0
            spread[s.name] = sd if sd > 0 else 1.0

    out = {name: col.copy() for name, col in table.data.items()}
    t_missing = {s.name: table.missing(s.name) for s in specs}
    for i in np.flatnonzero(np.any([t_missing[s.name] for s in specs], axis=0)):
        observed = [s for s in specs if not t_missing[s.name][i]]
        dist2 = np.zeros(donors.n_rows)
        usable = np.ones(donors.n_rows, dtype=bool)
        for s in observed:
            usable &= ~d_missing[s.name]
            dcol, v = donors.data[s.name], table.data[s.name][i]
            if s.kind == "continuous":
                diff = np.where(d_missing[s.name], 0.0, (dcol - v) / spread[s.name])
                dist2 += diff * diff
            elif s.kind == "binary":
                dist2 += np.where(d_missing[s.name], 0.0, (dcol != v).astype(float))
            else:
                dist2 += np.array([u is not None and u != v for u in dcol], dtype=float)
        for s in specs:
            if not t_missing[s.name][i]:
                continue
            cand = np.flatnonzero(usable & ~d_missing[s.name])
            if cand.size == 0:
                raise ImputationError(
                    f"no donor row has {s.name!r} and the covariates observed in row {table.ids[i]!r}"
                )
            order = cand[np.argsort(dist2[cand], kind="stable")][:k]
            vals = donors.data[s.name][order]
            if s.kind == "continuous":
                out[s.name][i] = float(np.mean(vals))
            else:
                out[s.name][i] = _mode(vals, numeric=s.kind == "binary")
    return CohortTable(table.schema, out, table.ids.copy(),
                       None if table.embeddings is None else table.embeddings.copy())


def _mode(values, numeric):
    counts = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    best = max(counts.values())
    winners = [v for v, c in counts.items() if c == best]
    return min(winners) if numeric else min(winners, key=str)


# --------------------------------------------------------------------------
# standardization / encoding

@dataclass(frozen=True)
class StandardizerParams:
    """Training-partition statistics and the design-matrix layout.

    ``layout`` lists ``(source column, level)`` per design column; ``level``
    is ``None`` for continuous, binary and treatment columns.
    """

    means: dict
    sds: dict
    layout: tuple
    treatment: str

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(src if lvl is None else f"{src}={lvl}" for src, lvl in self.layout)

    @property
    def treatment_index(self) -> int:
        return self.feature_names.index(self.treatment)

    def to_dict(self):
        return {
            "means": self.means, "sds": self.sds,
            "layout": [[s, l] for s, l in self.layout], "treatment": self.treatment,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d["means"]), dict(d["sds"]),
                   tuple((s, l) for s, l in d["layout"]), d["treatment"])


@dataclass(frozen=True, eq=False)
class Design:
    """Numeric model inputs derived from a cohort."""

    X: np.ndarray
    y: np.ndarray
    treatment_index: int
    feature_names: tuple[str, ...]
    ids: np.ndarray
    E: np.ndarray | None = None

    @property
    def n_rows(self):
        return self.X.shape[0]

    @property
    def treated(self):
        return self.X[:, self.treatment_index].astype(np.int64)

    def take(self, rows):
        rows = np.asarray(rows)
        return replace(self, X=self.X[rows], y=self.y[rows], ids=self.ids[rows],
                       E=None if self.E is None else self.E[rows])


def fit_standardizer(table: CohortTable) -> StandardizerParams:
    """Means and population SDs of continuous covariates plus the dummy layout."""
    schema = table.schema
    means, sds, layout = {}, {}, []
    for spec in schema.columns:
        if spec.role == "treatment":
            layout.append((spec.name, None))
        if spec.role != "covariate":
            continue
        if table.missing(spec.name).any():
            raise FitError(f"column {spec.name!r} has missing values; impute before fitting")
        if spec.kind == "continuous":
            col = table.data[spec.name]
            sd = float(col.std())
            if not sd > 0:
                raise FitError(f"continuous column {spec.name!r} is constant in the training rows")
            means[spec.name] = float(col.mean())
            sds[spec.name] = sd
            layout.append((spec.name, None))
        elif spec.kind == "binary":
            layout.append((spec.name, None))
        else:
            layout.extend((spec.name, lvl) for lvl in spec.levels[1:])
    return StandardizerParams(means, sds, tuple(layout), schema.treatment)


def apply_standardizer(params: StandardizerParams, table: CohortTable) -> Design:
    """Design matrix: continuous z-scored, binary and treatment kept 0/1, categoricals dummy-coded."""
    schema = table.schema
    n = table.n_rows
    X = np.empty((n, len(params.layout)))
    for j, (src, lvl) in enumerate(params.layout):
        if src not in table.data:
            raise FitError(f"column {src!r} is not in the table")
        if table.missing(src).any():
            raise FitError(f"column {src!r} has missing values; impute before applying")
        col = table.data[src]
        if lvl is not None:
            allowed = schema.spec(src).levels
            for v in col:
                if v not in allowed:
                    raise FitError(f"unseen level {v!r} in column {src!r}")
            X[:, j] = [1.0 if v == lvl else 0.0 for v in col]
        elif src in params.means:
            X[:, j] = (col - params.means[src]) / params.sds[src]
        else:
            X[:, j] = col
    return Design(X, table.outcome.copy(), params.treatment_index, params.feature_names,
                  table.ids.copy(), None if table.embeddings is None else table.embeddings.copy())


# --------------------------------------------------------------------------
# splits

def strata_labels(y, scale: OutcomeScale, min_count: int):
    """Ordinal class when every observed class has ``min_count`` rows, else favorable/unfavorable."""
    y = np.asarray(y)
    _, counts = np.unique(y, return_counts=True)
    if counts.min() >= min_count:
        return y.copy(), "ordinal"
    return (y > scale.favorable_cut).astype(np.int64), "binary"


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Test-fold labels 1..folds and, per fold, validation flags over all rows."""

    fold: np.ndarray
    validation: np.ndarray
    seed: int
    strata: str

    @property
    def n_folds(self) -> int:
        return self.validation.shape[0]

    def test_rows(self, i):
        return np.flatnonzero(self.fold == i)

    def train_rows(self, i):
        return np.flatnonzero((self.fold != i) & ~self.validation[i - 1])

    def val_rows(self, i):
        return np.flatnonzero(self.validation[i - 1])


def stratified_kfold(y, scale: OutcomeScale, folds: int = 5, seed: int = 0):
    """Fold labels in 1..folds by per-stratum round robin after a seeded shuffle.

    Returns ``(fold_labels, strata_kind)``. The round-robin counter carries
    over between strata so fold sizes differ by at most one.
    """
    y = np.asarray(y)
    n = y.shape[0]
    if n < folds:
        raise SplitError(f"{n} rows cannot be split into {folds} folds")
    strata, kind = strata_labels(y, scale, folds)
    rng = np.random.default_rng(seed)
    labels = np.zeros(n, dtype=np.int64)
    counter = 0
    for s in np.unique(strata):
        members = rng.permutation(np.flatnonzero(strata == s))
        labels[members] = (counter + np.arange(members.size)) % folds + 1
        counter += members.size
    return labels, kind


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def train_val_split(y, scale: OutcomeScale, fraction: float = 0.15, seed: int = 0,
                    min_count: int = 5) -> np.ndarray:
    """Boolean validation flags; size ``round_half_up(fraction * n)``, at least 1.

    Stratified with the same rule as :func:`stratified_kfold`; per-stratum
    quotas use largest remainders so the total is exact.
    """
    y = np.asarray(y)
    n = y.shape[0]
    if n < 2:
        raise SplitError("need at least two rows for a train/validation split")
    n_val = min(max(1, round_half_up(Fraction(str(fraction)) * n)), n - 1)
    strata, _ = strata_labels(y, scale, min_count)
    levels, counts = np.unique(strata, return_counts=True)
    exact = [Fraction(n_val * int(c), n) for c in counts]
    quota = [math.floor(q) for q in exact]
    order = sorted(range(len(levels)), key=lambda j: (-(exact[j] - quota[j]), j))
    for j in order[: n_val - sum(quota)]:
        quota[j] += 1
    rng = np.random.default_rng(seed)
    flags = np.zeros(n, dtype=bool)
    for lvl, q in zip(levels, quota):
        members = rng.permutation(np.flatnonzero(strata == lvl))
        flags[members[:q]] = True
    return flags


def make_fold_plan(y, scale: OutcomeScale, folds: int = 5, seed: int = 0,
                   val_fraction: float = 0.15) -> FoldPlan:
    """Test folds plus a stratified train/validation split of each fold's complement."""
    y = np.asarray(y)
    fold, kind = stratified_kfold(y, scale, folds, seed)
    validation = np.zeros((folds, y.shape[0]), dtype=bool)
    for i in range(1, folds + 1):
        rest = np.flatnonzero(fold != i)
        flags = train_val_split(y[rest], scale, val_fraction, seed + i, min_count=folds)
        validation[i - 1, rest[flags]] = True
    return FoldPlan(fold, validation, seed, kind)
