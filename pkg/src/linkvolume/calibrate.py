"""Random-forest calibration of weighted volumes against AADT stations."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import joblib
import numpy as np
import pandas as pd
import sklearn
from sklearn.ensemble import RandomForestRegressor
from sklearn.model_selection import GridSearchCV, KFold

from .netmodel import RoadNetwork
from .volume import LinkVolume

MODEL_FORMAT = "linkvolume.calibration/1"
SLD_FIELDS = ("TotEMP", "Pct_AO0", "D1A", "D1C", "D3AAO", "D3B", "D5AR")
MIN_TRAIN_SAMPLES = 50
MIN_STRATUM_SAMPLES = 3
DEFAULT_GRID = {
    "n_estimators": (100, 300),
    "max_depth": (8, 16, None),
    "min_samples_leaf": (1, 5, 20),
}

LINK_TYPE_GROUPS = {
    "motorway": "Interstate Highways and Highways",
    "trunk": "Interstate Highways and Highways",
    "primary": "Primary Roads",
    "secondary": "Secondary Roads",
    "tertiary": "Tertiary Roads",
    "ramp": "Highway Ramps",
}
LOCAL_GROUP = "Local Roads"
GROUP_ORDER = (
    "Interstate Highways and Highways",
    "Primary Roads",
    "Secondary Roads",
    "Tertiary Roads",
    LOCAL_GROUP,
    "Highway Ramps",
)


class CalibrationError(ValueError):
    pass


class SchemaMismatchError(CalibrationError):
    pass


@dataclass(frozen=True)
class AadtStation:
    link_id: int
    aadt: float


@dataclass(frozen=True)
class FeatureVector:
    link_id: int
    weighted_volume: float
    lanes: int
    speed_limit: float
    link_type: str
    county: str
    urban: bool
    sld: tuple[float, ...] = (0.0,) * len(SLD_FIELDS)
    sld_missing: bool = True


def build_features(lv: LinkVolume, net: RoadNetwork, sld: Mapping[int, Mapping[str, float]] | None = None) -> FeatureVector:
    if lv.link_id not in net.links:
        raise KeyError(f"unknown link id {lv.link_id}")
    link = net.links[lv.link_id]
    if link.lanes is None or link.speed_limit is None:
        raise CalibrationError(f"link {link.link_id} has unimputed attributes")
    row = None if sld is None else sld.get(lv.link_id)
    values = (0.0,) * len(SLD_FIELDS) if row is None else tuple(float(row[k]) for k in SLD_FIELDS)
    return FeatureVector(
        link_id=link.link_id,
        weighted_volume=float(lv.weighted),
        lanes=int(link.lanes),
        speed_limit=float(link.speed_limit),
        link_type=link.link_type,
        county=str(link.county),
        urban=bool(link.urban),
        sld=values,
        sld_missing=row is None,
    )


@dataclass(frozen=True)
class FeatureSchema:
    link_types: tuple[str, ...]
    counties: tuple[str, ...]

    @property
    def columns(self) -> tuple[str, ...]:
        return (
            "weighted_volume",
            "lanes",
            "speed_limit",
            "link_type",
            "county",
            "urban",
            *SLD_FIELDS,
            "sld_missing",
        )

    @classmethod
    def fit(cls, features: Iterable[FeatureVector]) -> FeatureSchema:
        features = list(features)
        return cls(
            link_types=tuple(sorted({f.link_type for f in features})),
            counties=tuple(sorted({f.county for f in features})),
        )

    def encode(self, features: Sequence[FeatureVector]) -> np.ndarray:
        lt = {v: i for i, v in enumerate(self.link_types)}
        co = {v: i for i, v in enumerate(self.counties)}
        rows = []
        for f in features:
            if len(f.sld) != len(SLD_FIELDS):
                raise SchemaMismatchError(f"expected {len(SLD_FIELDS)} SLD values, got {len(f.sld)}")
            rows.append(
                [
                    f.weighted_volume,
                    f.lanes,
                    f.speed_limit,
                    lt.get(f.link_type, -1),
                    co.get(f.county, -1),
                    float(f.urban),
                    *f.sld,
                    float(f.sld_missing),
                ]
            )
        return np.asarray(rows, dtype=float).reshape(-1, len(self.columns))


@dataclass
class CalibrationModel:
    estimator: RandomForestRegressor
    schema: FeatureSchema
    metadata: dict = field(default_factory=dict)

    def predict(self, features: Sequence[FeatureVector] | np.ndarray) -> np.ndarray:
        if isinstance(features, np.ndarray):
            X = features
            if X.ndim != 2 or X.shape[1] != len(self.schema.columns):
                raise SchemaMismatchError(f"expected {len(self.schema.columns)} columns, got shape {X.shape}")
        else:
            X = self.schema.encode(features)
        if len(X) == 0:
            return np.empty(0)
        return np.maximum(self.estimator.predict(X), 0.0)

    def save(self, path: str | Path) -> None:
        joblib.dump(
            {"format": MODEL_FORMAT, "schema": asdict(self.schema), "metadata": self.metadata, "estimator": self.estimator},
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> CalibrationModel:
        blob = joblib.load(path)
        if blob.get("format") != MODEL_FORMAT:
            raise SchemaMismatchError(f"{path}: unsupported model format {blob.get('format')!r}")
        schema = FeatureSchema(**{k: tuple(v) for k, v in blob["schema"].items()})
        return cls(blob["estimator"], schema, blob["metadata"])


def predict_volume(model: CalibrationModel, features: Sequence[FeatureVector]) -> np.ndarray:
    return model.predict(features)


def _canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    keys = [y] + [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


def train_calibrator(
    samples: Sequence[tuple[FeatureVector, float]],
    folds: int = 10,
    seed: int = 0,
    grid: Mapping[str, Sequence] | None = None,
    n_jobs: int | None = None,
) -> CalibrationModel:
    """Tune a random forest by k-fold CV RMSE, then refit on all samples.

    Samples are put in a canonical order before fold assignment so the
    result depends only on the sample set and the seed.
    """
    if len(samples) < MIN_TRAIN_SAMPLES:
        raise CalibrationError(f"need at least {MIN_TRAIN_SAMPLES} samples, got {len(samples)}")
    grid = dict(DEFAULT_GRID if grid is None else grid)
    features = [f for f, _ in samples]
    schema = FeatureSchema.fit(features)
    X = schema.encode(features)
    y = np.asarray([a for _, a in samples], dtype=float)
    order = _canonical_order(X, y)
    X, y = X[order], y[order]

    search = GridSearchCV(
        RandomForestRegressor(random_state=seed),
        {k: list(v) for k, v in grid.items()},
        scoring="neg_root_mean_squared_error",
        cv=KFold(n_splits=folds, shuffle=True, random_state=seed),
        n_jobs=n_jobs,
        refit=True,
    )
    search.fit(X, y)
    best = {k: (v.item() if isinstance(v, np.generic) else v) for k, v in search.best_params_.items()}
    metadata = {
        "folds": folds,
        "seed": seed,
        "grid": {k: list(v) for k, v in grid.items()},
        "best_params": best,
        "cv_rmse": float(-search.best_score_),
        "n_samples": int(len(y)),
        "sklearn": sklearn.__version__,
    }
    return CalibrationModel(search.best_estimator_, schema, metadata)


# --- evaluation -----------------------------------------------------------------------


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) != len(b):
        raise ValueError("length mismatch")
    if len(a) < 2:
        return math.nan
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0:
        return math.nan
    return float(np.clip(float(da @ db) / denom, -1.0, 1.0))


def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if len(pred) == 0:
        return math.nan
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def link_type_group(link_type: str) -> str:
    return LINK_TYPE_GROUPS.get(link_type, LOCAL_GROUP)


@dataclass(frozen=True)
class EvalRow:
    kind: str  # "all", "link_type" or "urban"
    group: str
    n: int
    corr_before: float
    corr_after: float
    rmse_before: float
    rmse_after: float


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[EvalRow, ...]

    def get(self, kind: str, group: str) -> EvalRow:
        for row in self.rows:
            if row.kind == kind and row.group == group:
                return row
        raise KeyError((kind, group))

    @property
    def overall(self) -> EvalRow:
        return self.get("all", "All")

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows])


def _metrics_row(kind: str, group: str, before: np.ndarray, after: np.ndarray, target: np.ndarray) -> EvalRow:
    n = len(target)
    if n < MIN_STRATUM_SAMPLES:
        nan = math.nan
        return EvalRow(kind, group, n, nan, nan, nan, nan)
    return EvalRow(kind, group, n, pearson(before, target), pearson(after, target), rmse(before, target), rmse(after, target))


def evaluate(model: CalibrationModel, samples: Sequence[tuple[FeatureVector, float]]) -> EvalReport:
    """Correlation and RMSE before (weighted) and after (calibrated), overall and by stratum."""
    features = [f for f, _ in samples]
    target = np.asarray([a for _, a in samples], dtype=float)
    before = np.asarray([f.weighted_volume for f in features], dtype=float)
    after = model.predict(features) if features else np.empty(0)
    return report_from_predictions(features, before, after, target)


def report_from_predictions(features: Sequence[FeatureVector], before, after, target) -> EvalReport:
    before, after, target = (np.asarray(v, dtype=float) for v in (before, after, target))
    rows = [_metrics_row("all", "All", before, after, target)]
    groups = np.asarray([link_type_group(f.link_type) for f in features], dtype=object)
    for g in GROUP_ORDER:
        m = groups == g
        if m.any():
            rows.append(_metrics_row("link_type", g, before[m], after[m], target[m]))
    urban = np.asarray([f.urban for f in features], dtype=bool)
    for label, m in (("Rural", ~urban), ("Urban", urban)):
        if m.any():
            rows.append(_metrics_row("urban", label, before[m], after[m], target[m]))
    return EvalReport(tuple(rows))


TABLE_COLUMNS = (
    "group",
    "train_corr_before",
    "train_corr_after",
    "train_rmse_before",
    "train_rmse_after",
    "test_corr_before",
    "test_corr_after",
    "test_rmse_before",
    "test_rmse_after",
    "train_n",
    "test_n",
)


def comparison_table(train: EvalReport, test: EvalReport, kind: str) -> pd.DataFrame:
    """Train/test before/after layout, one row per group with "All" first.

    ``kind`` is ``"link_type"`` or ``"urban"``.
    """
    present = {row.group for report in (train, test) for row in report.rows if row.kind == kind}
    order = GROUP_ORDER if kind == "link_type" else ("Rural", "Urban")
    groups = ["All"] + [g for g in order if g in present]

    def lookup(report: EvalReport, g: str) -> EvalRow | None:
        try:
            return report.get("all" if g == "All" else kind, g)
        except KeyError:
            return None

    records = []
    for g in groups:
        rec = {"group": g}
        for prefix, report in (("train", train), ("test", test)):
            row = lookup(report, g)
            for metric in ("corr_before", "corr_after", "rmse_before", "rmse_after"):
                rec[f"{prefix}_{metric}"] = math.nan if row is None else getattr(row, metric)
            rec[f"{prefix}_n"] = 0 if row is None else row.n
        records.append(rec)
    return pd.DataFrame(records, columns=list(TABLE_COLUMNS))


# --- I/O ---------------------------------------------------------------------------------


def read_aadt(path: str | Path) -> list[AadtStation]:
    df = pd.read_csv(path, float_precision="round_trip")
    missing = {"link_id", "aadt"} - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing AADT columns {sorted(missing)}")
    seen = set()
    out = []
    for lid, aadt in zip(df["link_id"].astype(int).tolist(), df["aadt"].astype(float).tolist()):
        if lid in seen:
            raise ValueError(f"{path}: duplicate AADT record for link {lid}")
        if not aadt > 0:
            raise ValueError(f"{path}: AADT must be positive (link {lid})")
        seen.add(lid)
        out.append(AadtStation(lid, aadt))
    return out


def read_sld(path: str | Path) -> dict[int, dict[str, float]]:
    df = pd.read_csv(path, float_precision="round_trip")
    missing = ({"link_id"} | set(SLD_FIELDS)) - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing SLD columns {sorted(missing)}")
    return {int(rec["link_id"]): {k: float(rec[k]) for k in SLD_FIELDS} for rec in df.to_dict("records")}


def build_samples(
    volumes: Iterable[LinkVolume],
    stations: Iterable[AadtStation],
    net: RoadNetwork,
    sld: Mapping[int, Mapping[str, float]] | None = None,
) -> list[tuple[FeatureVector, float]]:
    by_link = {lv.link_id: lv for lv in volumes}
    samples = []
    for st in sorted(stations, key=lambda s: s.link_id):
        if st.link_id not in by_link:
            raise KeyError(f"AADT station on unknown link {st.link_id}")
        samples.append((build_features(by_link[st.link_id], net, sld), st.aadt))
    return samples


def split_train_test(n: int, test_share: float = 0.1, seed: int = 0) -> np.ndarray:
    """Boolean mask, True for held-out test rows."""
    rng = np.random.default_rng(seed)
    n_test = int(round(n * test_share))
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:n_test]] = True
    return mask
