"""Datasets, normalization, sharding, run configuration and metrics files."""

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .consensus import ConfigError, Problem, SolverConfig
from .models import ModelSpec, Shard

SCHEMA_VERSION = 1
METRICS_HEADER = [
    "k", "r_norm", "s_norm", "aug_lagrangian", "eps_max",
    "nlp_solves", "linear_solves", "max_worker_wall_time_s", "mode",
]
SHARD_POLICIES = ("contiguous", "round_robin")


class DataError(ValueError):
    """Malformed dataset or data-related configuration."""


@dataclass
class RawDataset:
    """A feature table with regression targets or class indices.

    For classification `labels` holds indices into `classes`.
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: list
    label_names: list
    classes: list = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D table")
        if self.classes is None:
            self.labels = np.asarray(self.labels, dtype=float)
            if self.labels.ndim == 1:
                self.labels = self.labels[:, None]
        else:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape[0] != self.features.shape[0]:
            raise DataError("feature and label row counts differ")

    @property
    def n_rows(self):
        return self.features.shape[0]

    @property
    def is_classification(self):
        return self.classes is not None


def load_csv(path, schema=None):
    """Read a comma-separated file with a header row.

    Parameters
    ----------
    schema : dict, optional
        ``label``: label column name or list of names (default: last column);
        ``features``: feature column names (default: every other column);
        ``task``: ``"regression"`` (default) or ``"classification"``;
        ``classes``: for classification, the allowed labels in index order
        (default: sorted distinct values as found).
    """
    schema = dict(schema or {})
    task = schema.get("task", "regression")
    if task not in ("regression", "classification"):
        raise DataError(f"unknown task {task!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}:{i}: ragged row ({len(r)} cells, header has {len(header)})")
    label = schema.get("label", header[-1])
    label_names = [label] if isinstance(label, str) else list(label)
    feature_names = schema.get("features") or [h for h in header if h not in label_names]
    for name in feature_names + label_names:
        if name not in header:
            raise DataError(f"{path}: no column named {name!r}")

    def numeric(cols):
        idx = [header.index(c) for c in cols]
        out = np.empty((len(body), len(idx)))
        for i, r in enumerate(body):
            for j, c in enumerate(idx):
                try:
                    out[i, j] = float(r[c])
                except ValueError:
                    raise DataError(f"{path}:{i + 2}: non-numeric value {r[c]!r} in {header[c]!r}") from None
        return out

    features = numeric(feature_names)
    if task == "regression":
        return RawDataset(features, numeric(label_names), feature_names, label_names)
    if len(label_names) != 1:
        raise DataError("classification needs exactly one label column")
    col = header.index(label_names[0])
    raw = [r[col].strip() for r in body]
    classes = schema.get("classes") or sorted(set(raw))
    lookup = {c: i for i, c in enumerate(classes)}
    try:
        labels = [lookup[v] for v in raw]
    except KeyError as exc:
        raise DataError(f"{path}: unknown class label {exc.args[0]!r}") from None
    return RawDataset(features, labels, feature_names, label_names, list(classes))


@dataclass
class NormalizationStats:
    """Column statistics used to standardize a dataset (sample std, ddof = 1).

    Constant columns are listed in `constant_features` and passed through
    with scale 1.
    """

    feature_mean: np.ndarray
    feature_std: np.ndarray
    label_mean: np.ndarray = None
    label_std: np.ndarray = None
    constant_features: list = field(default_factory=list)
    ddof: int = 1

    @property
    def labels_normalized(self):
        return self.label_mean is not None

    def apply(self, ds):
        """Scale `ds` with these (stored) statistics."""
        feats = (ds.features - self.feature_mean) / self.feature_std
        labels = ds.labels
        if self.labels_normalized:
            labels = (labels - self.label_mean) / self.label_std
        return RawDataset(feats, labels, ds.feature_names, ds.label_names, ds.classes)

    def to_dict(self):
        d = {
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "constant_features": list(self.constant_features),
            "ddof": self.ddof,
            "labels_normalized": self.labels_normalized,
        }
        if self.labels_normalized:
            d["label_mean"] = self.label_mean.tolist()
            d["label_std"] = self.label_std.tolist()
        return d


def _column_stats(a):
    mean = a.mean(axis=0)
    std = a.std(axis=0, ddof=1) if a.shape[0] > 1 else np.zeros(a.shape[1])
    const = [int(j) for j in np.flatnonzero(~(std > 0))]
    std = np.where(std > 0, std, 1.0)
    return mean, std, const


def normalize(ds, labels=True):
    """Standardize every feature column (and regression labels unless ``labels=False``).

    Statistics come from the whole dataset, so call this before sharding.
    """
    fm, fs, const = _column_stats(ds.features)
    stats = NormalizationStats(fm, fs, constant_features=const)
    if labels and not ds.is_classification:
        lm, ls, _ = _column_stats(ds.labels)
        stats.label_mean, stats.label_std = lm, ls
    return stats.apply(ds), stats


def shard_split(ds, n_shards, policy="contiguous"):
    """Partition rows into `n_shards` Shards.

    ``contiguous`` gives consecutive blocks whose sizes differ by at most
    one (larger blocks first); ``round_robin`` gives row j to shard j mod N.
    """
    M = ds.n_rows
    if n_shards < 1:
        raise DataError("need at least one shard")
    if n_shards > M:
        raise DataError(f"{n_shards} shards requested for {M} rows")
    if policy == "contiguous":
        parts = np.array_split(np.arange(M), n_shards)
    elif policy == "round_robin":
        parts = [np.arange(i, M, n_shards) for i in range(n_shards)]
    else:
        raise DataError(f"unknown shard policy {policy!r}")
    n_classes = len(ds.classes) if ds.is_classification else 0
    return [Shard(ds.features[idx], ds.labels[idx], n_classes) for idx in parts]


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_metrics(trace, path, meta=None):
    """Write one CSV row per IterationRecord; `meta` goes to ``<path>.meta.json``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for rec in trace:
            w.writerow([
                _fmt(rec.k), _fmt(rec.r_norm), _fmt(rec.s_norm), _fmt(rec.aug_lagrangian),
                _fmt(rec.eps_max), _fmt(rec.nlp_solves), _fmt(rec.linear_solves),
                _fmt(rec.max_worker_wall_time), rec.worker_modes,
            ])
    if meta is not None:
        with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def read_metrics(path):
    """Read a metrics CSV back into a list of dicts with typed values."""
    ints = {"k", "nlp_solves", "linear_solves"}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRICS_HEADER:
            raise DataError(f"{path}: unexpected metrics header {header}")
        out = []
        for row in reader:
            d = {}
            for name, cell in zip(header, row):
                if name in ints:
                    d[name] = int(cell)
                elif name == "mode":
                    d[name] = cell
                else:
                    d[name] = float(cell)
            out.append(d)
    return out


def synthetic_power_plant(n_rows=9568, seed=0):
    """Regression table shaped like combined-cycle power plant data.

    Four correlated ambient features in physical units (temperature in C,
    exhaust vacuum in cm Hg, pressure in mbar, relative humidity in %) and
    net electrical output in MW. The output is mostly linear in the
    features with a mild saturation in temperature and noise, so a small
    sigmoid network explains a bit more variance than a linear fit.
    """
    rng = np.random.default_rng(seed)
    season = rng.uniform(0, 2 * np.pi, n_rows)
    at = 19.6 + 8.5 * np.sin(season) + rng.normal(0, 3.0, n_rows)
    at = np.clip(at, 1.8, 37.1)
    v = 54.3 + 1.45 * (at - 19.6) + rng.normal(0, 7.0, n_rows)
    v = np.clip(v, 25.4, 81.6)
    ap = 1013.3 - 0.45 * (at - 19.6) + rng.normal(0, 4.7, n_rows)
    rh = 73.3 - 1.0 * (at - 19.6) + rng.normal(0, 12.0, n_rows)
    rh = np.clip(rh, 25.6, 100.2)
    pe = (
        454.4
        - 1.55 * (at - 19.6)
        - 0.27 * (v - 54.3)
        + 0.07 * (ap - 1013.3)
        - 0.11 * (rh - 73.3)
        - 9.0 * np.tanh((at - 24.0) / 6.0)
        + rng.normal(0, 4.6, n_rows)
    )
    feats = np.column_stack([at, v, ap, rh])
    return RawDataset(feats, pe, ["AT", "V", "AP", "RH"], ["PE"])


ROBOT_CLASSES = ["Move-Forward", "Sharp-Right-Turn", "Slight-Right-Turn", "Slight-Left-Turn"]


def synthetic_wall_robot(n_rows=5456, seed=0):
    """Classification table shaped like wall-following robot navigation data.

    Features are simplified front/left/right/back distances in metres;
    the label is the action of a rule-based wall follower keeping the wall
    on its right, with some label noise.
    """
    rng = np.random.default_rng(seed)
    front = rng.gamma(3.0, 0.55, n_rows).clip(0.4, 5.0)
    left = rng.gamma(3.0, 0.5, n_rows).clip(0.3, 5.0)
    right = rng.gamma(2.0, 0.6, n_rows).clip(0.3, 5.0)
    back = rng.gamma(3.0, 0.6, n_rows).clip(0.3, 5.0)
    y = np.full(n_rows, 0)
    y[right > 1.9] = 1
    y[(right > 1.05) & (right <= 1.9)] = 2
    y[(front < 0.9) | (right < 0.55)] = 3
    flip = rng.uniform(size=n_rows) < 0.03
    y[flip] = rng.integers(0, 4, flip.sum())
    feats = np.column_stack([front, left, right, back])
    return RawDataset(feats, y, ["SD_front", "SD_left", "SD_right", "SD_back"], ["Class"], list(ROBOT_CLASSES))


def write_csv(ds, path):
    """Write a RawDataset as a CSV file readable by :func:`load_csv`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ds.feature_names + ds.label_names)
        for f, lab in zip(ds.features, ds.labels):
            if ds.is_classification:
                w.writerow([_fmt(v) for v in f] + [ds.classes[int(lab)]])
            else:
                w.writerow([_fmt(v) for v in f] + [_fmt(v) for v in np.atleast_1d(lab)])


SYNTHETIC = {"synthetic_power_plant": synthetic_power_plant, "synthetic_wall_robot": synthetic_wall_robot}


@dataclass
class RunConfig:
    """File form of a run: solver knobs, model, dataset, carrier and outputs."""

    solver: SolverConfig
    model: ModelSpec
    dataset: dict
    transport: dict = field(default_factory=lambda: {"kind": "loopback"})
    output_dir: str = "runs"
    normalize_labels: bool = True
    shard_policy: str = "contiguous"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.shard_policy not in SHARD_POLICIES:
            raise ConfigError(f"unknown shard_policy {self.shard_policy!r}")
        src = self.dataset.get("source")
        if src == "csv":
            if "path" not in self.dataset:
                raise ConfigError("csv dataset needs a path")
        elif src not in SYNTHETIC:
            raise ConfigError(f"unknown dataset source {src!r}")
        kind = self.transport.get("kind")
        if kind not in ("loopback", "tcp"):
            raise ConfigError(f"unknown transport kind {kind!r}")

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "solver": self.solver.to_dict(),
            "model": self.model.to_dict(),
            "dataset": dict(self.dataset),
            "transport": dict(self.transport),
            "output_dir": self.output_dir,
            "normalize_labels": self.normalize_labels,
            "shard_policy": self.shard_policy,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        required = {"schema_version", "solver", "model", "dataset"}
        missing = required - set(d)
        if missing:
            raise ConfigError(f"config is missing {sorted(missing)}")
        known = {"schema_version", "solver", "model", "dataset", "transport", "output_dir",
                 "normalize_labels", "shard_policy"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            d["solver"] = SolverConfig.from_dict(d["solver"])
            d["model"] = ModelSpec.from_dict(d["model"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cls(**d)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)


def load_run_config(path):
    with open(path, encoding="utf-8") as fh:
        return RunConfig.loads(fh.read())


def save_run_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.dumps() + "\n")


def load_dataset(spec):
    """Materialize the dataset described by a RunConfig ``dataset`` entry."""
    src = spec.get("source")
    if src == "csv":
        return load_csv(spec["path"], spec.get("schema"))
    kwargs = {k: spec[k] for k in ("n_rows", "seed") if k in spec}
    return SYNTHETIC[src](**kwargs)


def build_problem(run_cfg):
    """Load, normalize and shard the data of `run_cfg`; returns ``(problem, stats)``."""
    ds = load_dataset(run_cfg.dataset)
    ds, stats = normalize(ds, labels=run_cfg.normalize_labels)
    spec = run_cfg.model
    if ds.features.shape[1] != spec.input_dim:
        raise DataError(f"dataset has {ds.features.shape[1]} features, model expects {spec.input_dim}")
    if ds.is_classification and len(ds.classes) != spec.output_dim:
        raise DataError(f"dataset has {len(ds.classes)} classes, model expects {spec.output_dim}")
    shards = shard_split(ds, run_cfg.solver.n_workers, run_cfg.shard_policy)
    return Problem(spec, shards), stats


def fit_metrics(spec, x, ds):
    """Training MSE and R^2 for regression (on the dataset's own scale), accuracy for classification."""
    from .models import predict

    pred = predict(spec, x, ds.features)
    if ds.is_classification:
        return {"accuracy": float(np.mean(np.argmax(pred, axis=-1) == ds.labels))}
    pred = np.asarray(pred).reshape(ds.labels.shape)
    mse = float(np.mean((pred - ds.labels) ** 2))
    var = float(np.mean((ds.labels - ds.labels.mean(axis=0)) ** 2))
    return {"mse": mse, "r2": 1.0 - mse / var if var > 0 else math.nan}


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
