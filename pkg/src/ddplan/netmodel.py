"""Learned allreduce bandwidth model.

Probes of allreduce completion time are converted to *bus bandwidth*
``2 s (n - 1) / (n t)`` labels and fit with two tree-ensemble regressors,
one for buffers no larger than the network MTU and one for larger buffers.

Training uses scikit-learn's gradient boosting; the fitted trees are then
exported into plain arrays (see :class:`TreeEnsemble`) so that a trained
model is a self-describing JSON document that needs neither pickle nor
scikit-learn to be evaluated.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core import DomainError, VmType, dump_json, load_json, write_text_atomic

logger = logging.getLogger(__name__)

DEFAULT_MTU = 9000
DEFAULT_FLOOR = 1000.0  # bytes/second
MODEL_FORMAT = "ddplan.bandwidth_model"
MODEL_VERSION = 1
CSV_HEADER_COMMENT = "# ddplan probe csv v1"
CSV_COLUMNS = (
    "region",
    "zone",
    "device_kind",
    "cpu_kind",
    "rated_network_bps",
    "buffer_bytes",
    "world_size",
    "concurrent_transfers",
    "placement_group",
    "time_s",
)
CATEGORICAL = ("region", "zone", "device_kind", "cpu_kind")
UNKNOWN = "__unknown__"


class NoCommunicationError(DomainError):
    """Fewer than two participants: an allreduce moves no data."""


def _check(s: float, n: int) -> None:
    if n < 2:
        raise NoCommunicationError(f"world size {n} < 2")
    if s <= 0:
        raise DomainError(f"buffer size {s} must be > 0")


def bus_bandwidth(s: float, n: int, t: float) -> float:
    """Bus bandwidth of an allreduce of ``s`` bytes over ``n`` ranks taking ``t`` seconds."""
    _check(s, n)
    if t <= 0:
        raise DomainError(f"time {t} must be > 0")
    return 2.0 * s * (n - 1) / (n * t)


def allreduce_time(s: float, n: int, b_bus: float) -> float:
    """Seconds for an allreduce of ``s`` bytes over ``n`` ranks at bus bandwidth ``b_bus``."""
    _check(s, n)
    if b_bus <= 0:
        raise DomainError(f"bandwidth {b_bus} must be > 0")
    return 2.0 * s * (n - 1) / (n * b_bus)


def effective_bytes(s: float, n: int) -> float:
    """Bytes that, moved at the bus bandwidth, take the allreduce's wall time."""
    return 2.0 * s * (n - 1) / n


# -- dataset ------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeFeatures:
    region: str
    zone: str
    device_kind: str
    cpu_kind: str
    rated_network: float
    buffer_size: float
    world_size: int
    concurrent_transfers: int = 1
    placement_group: bool = False

    @classmethod
    def for_vm(cls, vm: VmType, buffer_size: float, world_size: int, concurrent: int = 1) -> "ProbeFeatures":
        return cls(
            region=vm.region,
            zone=vm.zone,
            device_kind=vm.device_kind,
            cpu_kind=vm.cpu_kind,
            rated_network=vm.rated_network,
            buffer_size=float(buffer_size),
            world_size=int(world_size),
            concurrent_transfers=int(concurrent),
            placement_group=bool(vm.placement_group),
        )


@dataclass(frozen=True)
class ProbeRecord:
    features: ProbeFeatures
    measured_time: float
    bus_bw: float
    age: float = 0.0

    def __post_init__(self):
        if self.features.world_size < 2:
            raise DomainError("world_size must be >= 2")
        if self.features.buffer_size < 4:
            raise DomainError("buffer_size must be >= 4")
        if self.measured_time <= 0:
            raise DomainError("measured_time must be > 0")


def build_dataset(raw_probes: Iterable[tuple]) -> list[ProbeRecord]:
    """Attach bus-bandwidth labels to raw ``(features, measured_time[, age])`` probes.

    Repeated observations of identical features stay separate rows. Invalid
    rows are skipped; the count is logged.
    """
    out: list[ProbeRecord] = []
    skipped = 0
    for row in raw_probes:
        feats, t = row[0], row[1]
        age = float(row[2]) if len(row) > 2 else 0.0
        try:
            bw = bus_bandwidth(feats.buffer_size, feats.world_size, t)
            out.append(ProbeRecord(feats, float(t), bw, age))
        except DomainError as exc:
            skipped += 1
            logger.debug("skipping probe %s: %s", feats, exc)
    if skipped:
        logger.warning("skipped %d invalid probe rows", skipped)
    return out


def write_probes_csv(records: Iterable[ProbeRecord], path) -> int:
    buf = io.StringIO()
    buf.write(CSV_HEADER_COMMENT + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    n = 0
    for r in records:
        f = r.features
        w.writerow(
            [
                f.region,
                f.zone,
                f.device_kind,
                f.cpu_kind,
                repr(float(f.rated_network)),
                repr(float(f.buffer_size)),
                f.world_size,
                f.concurrent_transfers,
                int(f.placement_group),
                repr(float(r.measured_time)),
            ]
        )
        n += 1
    write_text_atomic(path, buf.getvalue())
    return n


def read_probes_csv(path) -> list[ProbeRecord]:
    """Read a probe CSV; an optional trailing ``age`` column feeds sample decay."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
    if missing:
        raise DomainError(f"{path}: missing columns {sorted(missing)}")
    raw = []
    for r in reader:
        feats = ProbeFeatures(
            region=r["region"],
            zone=r["zone"],
            device_kind=r["device_kind"],
            cpu_kind=r["cpu_kind"],
            rated_network=float(r["rated_network_bps"]),
            buffer_size=float(r["buffer_bytes"]),
            world_size=int(r["world_size"]),
            concurrent_transfers=int(r["concurrent_transfers"]),
            placement_group=r["placement_group"].strip().lower() in ("1", "true", "yes"),
        )
        raw.append((feats, float(r["time_s"]), float(r.get("age") or 0.0)))
    return build_dataset(raw)


# -- feature encoding ---------------------------------------------------------


@dataclass(frozen=True)
class FeatureEncoding:
    vocab: Mapping[str, tuple[str, ...]]

    NUMERIC = ("log2_buffer", "world_size", "log2_world", "concurrent", "placement_group", "rated_gbps")

    @classmethod
    def fit(cls, records: Sequence[ProbeRecord]) -> "FeatureEncoding":
        return cls({c: tuple(sorted({getattr(r.features, c) for r in records})) for c in CATEGORICAL})

    @property
    def names(self) -> tuple[str, ...]:
        return self.NUMERIC + CATEGORICAL

    def encode(self, f: ProbeFeatures) -> list[float]:
        row = [
            math.log2(f.buffer_size),
            float(f.world_size),
            math.log2(f.world_size),
            float(f.concurrent_transfers),
            float(f.placement_group),
            f.rated_network / 1e9,
        ]
        for c in CATEGORICAL:
            vocab = self.vocab[c]
            v = getattr(f, c)
            # unseen values get their own code past the vocabulary
            row.append(float(vocab.index(v)) if v in vocab else float(len(vocab)))
        return row

    def matrix(self, feats: Iterable[ProbeFeatures]) -> np.ndarray:
        rows = [self.encode(f) for f in feats]
        return np.asarray(rows, dtype=float).reshape(len(rows), len(self.names))

    def to_dict(self) -> dict:
        return {"numeric": list(self.NUMERIC), "categorical": {c: list(v) for c, v in self.vocab.items()}}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FeatureEncoding":
        return cls({c: tuple(v) for c, v in d["categorical"].items()})


# -- serialisable regressors ---------------------------------------------------


@dataclass(frozen=True)
class Tree:
    """Binary regression tree; ``left[i] == -1`` marks a leaf. ``x <= threshold`` goes left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict_one(self, x: Sequence[float]) -> float:
        node = 0
        left, right, feat, thr = self.left, self.right, self.feature, self.threshold
        while left[node] != -1:
            node = left[node] if x[feat[node]] <= thr[node] else right[node]
        return float(self.value[node])

    def predict(self, X: np.ndarray) -> np.ndarray:
        n = X.shape[0]
        node = np.zeros(n, dtype=np.int64)
        rows = np.arange(n)
        while True:
            internal = self.left[node] != -1
            if not internal.any():
                break
            f = np.where(internal, self.feature[node], 0)
            go_left = X[rows, f] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)
        return self.value[node]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Tree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=float),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=float),
        )

    @classmethod
    def from_sklearn(cls, est, values: np.ndarray | None = None) -> "Tree":
        t = est.tree_
        v = t.value.reshape(-1) if values is None else values
        return cls(
            t.feature.astype(np.int64).copy(),
            t.threshold.astype(float).copy(),
            t.children_left.astype(np.int64).copy(),
            t.children_right.astype(np.int64).copy(),
            np.asarray(v, dtype=float).copy(),
        )


@dataclass(frozen=True)
class TreeEnsemble:
    """``raw = base + sum(scale_k * tree_k(x))``; bandwidth is ``exp(raw)`` for a log target."""

    base: float
    trees: tuple[tuple[float, Tree], ...]
    target: str = "log"

    def raw(self, X: np.ndarray) -> np.ndarray:
        out = np.full(X.shape[0], self.base)
        for scale, tree in self.trees:
            out += scale * tree.predict(X)
        return out

    def raw_one(self, x: Sequence[float]) -> float:
        return self.base + sum(scale * tree.predict_one(x) for scale, tree in self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        r = self.raw(X)
        return np.exp(r) if self.target == "log" else r

    def predict_one(self, x: Sequence[float]) -> float:
        r = self.raw_one(x)
        return math.exp(r) if self.target == "log" else r

    def to_dict(self) -> dict:
        return {
            "kind": "tree_ensemble",
            "base": self.base,
            "target": self.target,
            "trees": [{"scale": s, **t.to_dict()} for s, t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TreeEnsemble":
        return cls(
            float(d["base"]),
            tuple((float(t["scale"]), Tree.from_dict(t)) for t in d["trees"]),
            d.get("target", "log"),
        )


@dataclass(frozen=True)
class NearestNeighbor:
    """1-nearest-neighbour regressor on standardised features (split fallback)."""

    X: np.ndarray
    y: np.ndarray
    center: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray) -> "NearestNeighbor":
        center = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        return cls(X.copy(), y.copy(), center, scale)

    def predict(self, X: np.ndarray) -> np.ndarray:
        A = (X - self.center) / self.scale
        B = (self.X - self.center) / self.scale
        d = ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=2)
        return self.y[np.argmin(d, axis=1)]

    def predict_one(self, x: Sequence[float]) -> float:
        return float(self.predict(np.asarray([x], dtype=float))[0])

    def to_dict(self) -> dict:
        return {
            "kind": "nearest_neighbor",
            "X": self.X.tolist(),
            "y": self.y.tolist(),
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NearestNeighbor":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("X", "y", "center", "scale")))


def _regressor_from_dict(d: Mapping[str, Any]):
    if d["kind"] == "tree_ensemble":
        return TreeEnsemble.from_dict(d)
    if d["kind"] == "nearest_neighbor":
        return NearestNeighbor.from_dict(d)
    raise DomainError(f"unknown regressor kind {d['kind']!r}")


# -- the model ----------------------------------------------------------------


class BandwidthModel:
    """Two regressors split at the MTU; predictions are clamped to ``floor``."""

    def __init__(self, small_model, large_model, encoding: FeatureEncoding, mtu: float = DEFAULT_MTU,
                 floor: float = DEFAULT_FLOOR, metadata: Mapping[str, Any] | None = None):
        if small_model is None or large_model is None:
            raise DomainError("both sub-models are required")
        self.small_model = small_model
        self.large_model = large_model
        self.encoding = encoding
        self.mtu = float(mtu)
        self.floor = float(floor)
        self.metadata = dict(metadata or {})
        self._cache: dict[ProbeFeatures, tuple[float, bool]] = {}

    def submodel_for(self, buffer_size: float):
        return self.small_model if buffer_size <= self.mtu else self.large_model

    def predict_raw(self, features: ProbeFeatures) -> float:
        return self.submodel_for(features.buffer_size).predict_one(self.encoding.encode(features))

    def predict_with_flag(self, features: ProbeFeatures) -> tuple[float, bool]:
        """Prediction and whether it was clamped to the floor."""
        hit = self._cache.get(features)
        if hit is not None:
            return hit
        raw = self.predict_raw(features)
        out = (raw, False) if raw >= self.floor else (self.floor, True)
        if out[1]:
            logger.debug("clamped bandwidth prediction %.4g to floor for %s", raw, features)
        self._cache[features] = out
        return out

    def predict(self, features: ProbeFeatures) -> float:
        return self.predict_with_flag(features)[0]

    def predict_many(self, feats: Sequence[ProbeFeatures]) -> np.ndarray:
        X = self.encoding.matrix(feats)
        sizes = np.array([f.buffer_size for f in feats])
        out = np.empty(len(feats))
        small = sizes <= self.mtu
        if small.any():
            out[small] = self.small_model.predict(X[small])
        if (~small).any():
            out[~small] = self.large_model.predict(X[~small])
        return np.maximum(out, self.floor)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "mtu": self.mtu,
            "floor": self.floor,
            "feature_encoding": self.encoding.to_dict(),
            "small_model": self.small_model.to_dict(),
            "large_model": self.large_model.to_dict(),
            "training_metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BandwidthModel":
        if d.get("format") != MODEL_FORMAT:
            raise DomainError(f"not a bandwidth model artifact (format={d.get('format')!r})")
        if int(d.get("version", 0)) > MODEL_VERSION:
            raise DomainError(f"unsupported model version {d['version']}")
        return cls(
            _regressor_from_dict(d["small_model"]),
            _regressor_from_dict(d["large_model"]),
            FeatureEncoding.from_dict(d["feature_encoding"]),
            mtu=d["mtu"],
            floor=d["floor"],
            metadata=d.get("training_metadata", {}),
        )

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "BandwidthModel":
        return cls.from_dict(load_json(path))


def predict_bus_bw(model: BandwidthModel, features: ProbeFeatures) -> float:
    """Predicted bus bandwidth, routed by buffer size and clamped to the model floor."""
    if features.world_size < 2:
        raise NoCommunicationError("world size must be >= 2")
    return model.predict(features)


def predict_selection_bus_bw(
    model: BandwidthModel, vm_types: Iterable[VmType], s: float, n: int, concurrent: int = 1
) -> float:
    """Bus bandwidth of a possibly mixed selection: the slowest type's prediction."""
    return min(predict_bus_bw(model, ProbeFeatures.for_vm(vm, s, n, concurrent)) for vm in vm_types)


# -- training -----------------------------------------------------------------

DEFAULT_GRID = (
    {"n_estimators": 150, "max_depth": 3, "learning_rate": 0.1, "loss": "squared_error"},
    {"n_estimators": 150, "max_depth": 5, "learning_rate": 0.1, "loss": "squared_error"},
    {"n_estimators": 150, "max_depth": 3, "learning_rate": 0.1, "loss": "huber"},
    {"n_estimators": 150, "max_depth": 5, "learning_rate": 0.1, "loss": "huber"},
)


@dataclass
class TrainConfig:
    mtu: float = DEFAULT_MTU
    floor: float = DEFAULT_FLOOR
    target: str = "log"
    grid: Sequence[Mapping[str, Any]] = DEFAULT_GRID
    holdout_fraction: float = 0.2
    residual_tree: bool = True
    decay_rate: float = 0.0  # weight = exp(-decay_rate * age)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = [dict(g) for g in self.grid]
        return d


def _dataset_hash(records: Sequence[ProbeRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(repr((asdict(r.features), r.measured_time, r.age)).encode())
    return h.hexdigest()[:16]


def _config_groups(X: np.ndarray) -> np.ndarray:
    _, inv = np.unique(X, axis=0, return_inverse=True)
    return inv.reshape(-1)


def _fit_ensemble(X, y, w, params, config: TrainConfig) -> TreeEnsemble:
    from sklearn.ensemble import GradientBoostingRegressor
    from sklearn.tree import DecisionTreeRegressor

    z = np.log(y) if config.target == "log" else y
    gbr = GradientBoostingRegressor(random_state=config.seed, **params)
    gbr.fit(X, z, sample_weight=w)
    lr = gbr.learning_rate
    trees = [(lr, Tree.from_sklearn(est[0])) for est in gbr.estimators_]
    base = float(gbr.predict(X[:1])[0] - sum(s * t.predict(X[:1])[0] for s, t in trees))
    ens = TreeEnsemble(base, tuple(trees), config.target)

    if config.residual_tree:
        p = ens.raw(X)
        rt = DecisionTreeRegressor(random_state=config.seed)
        rt.fit(X, z - p, sample_weight=w)
        leaves = rt.apply(X)
        values = rt.tree_.value.reshape(-1).copy()
        for leaf in np.unique(leaves):
            m = leaves == leaf
            ww = w[m]
            if config.target == "log":
                # exp(p + v) equals the weighted mean label of the leaf's rows
                values[leaf] = math.log(np.sum(ww * y[m] * np.exp(-p[m])) / np.sum(ww))
            else:
                values[leaf] = np.sum(ww * (y[m] - p[m])) / np.sum(ww)
        ens = TreeEnsemble(base, tuple(trees) + ((1.0, Tree.from_sklearn(rt, values)),), config.target)
    return ens


def _mape(pred: np.ndarray, label: np.ndarray) -> float:
    return float(np.mean(np.abs(pred - label) / label) * 100.0)


def _fit_side(X, y, w, config: TrainConfig) -> tuple[TreeEnsemble, dict]:
    grid = list(config.grid)
    scores = []
    if len(grid) > 1:
        groups = _config_groups(X)
        uniq = np.unique(groups)
        rng = np.random.default_rng(config.seed)
        n_hold = int(round(config.holdout_fraction * len(uniq)))
        if 1 <= n_hold < len(uniq):
            held = rng.choice(uniq, size=n_hold, replace=False)
            test = np.isin(groups, held)
            for params in grid:
                ens = _fit_ensemble(X[~test], y[~test], w[~test], params, config)
                pred = np.maximum(ens.predict(X[test]), config.floor)
                scores.append(_mape(pred, y[test]))
    best = int(np.argmin(scores)) if scores else 0
    ens = _fit_ensemble(X, y, w, grid[best], config)
    meta = {"params": dict(grid[best]), "holdout_mape": scores[best] if scores else None,
            "grid_scores": scores, "rows": int(len(y))}
    return ens, meta


def train_model(dataset: Sequence[ProbeRecord], config: TrainConfig | None = None) -> BandwidthModel:
    """Fit the MTU-split bandwidth model.

    Hyperparameters come from ``config.grid``, picked by MAPE on held-out
    feature configurations. Sample weights decay exponentially with record
    age. A side of the split with no rows falls back to a nearest-neighbour
    model over the other side, which is recorded in the metadata.
    """
    config = config or TrainConfig()
    if not dataset:
        raise DomainError("cannot train on an empty dataset")
    enc = FeatureEncoding.fit(dataset)
    X = enc.matrix([r.features for r in dataset])
    y = np.array([r.bus_bw for r in dataset])
    w = np.exp(-config.decay_rate * np.array([r.age for r in dataset]))
    small = np.array([r.features.buffer_size <= config.mtu for r in dataset])

    models: dict[str, Any] = {}
    meta: dict[str, Any] = {
        "config": config.to_dict(),
        "dataset_hash": _dataset_hash(dataset),
        "feature_names": list(enc.names),
        "fallback": {},
    }
    for side, mask in (("small", small), ("large", ~small)):
        if mask.any():
            models[side], meta[side] = _fit_side(X[mask], y[mask], w[mask], config)
    for side, other in (("small", "large"), ("large", "small")):
        if side not in models:
            mask = ~small if side == "small" else small
            models[side] = NearestNeighbor.fit(X[mask], y[mask])
            meta["fallback"][side] = f"nearest_neighbor over {other}-buffer rows"
            logger.warning("no %s-buffer rows; using nearest-neighbour fallback", side)
    return BandwidthModel(models["small"], models["large"], enc, config.mtu, config.floor, meta)


# -- evaluation ---------------------------------------------------------------


def evaluate_mape(model: BandwidthModel, testset: Sequence[ProbeRecord]) -> float:
    """Mean absolute percentage error of ``model`` on labelled rows."""
    if not testset:
        raise DomainError("empty test set")
    pred = model.predict_many([r.features for r in testset])
    label = np.array([r.bus_bw for r in testset])
    return _mape(pred, label)


def _groups(testset: Sequence[ProbeRecord]) -> dict[ProbeFeatures, list[float]]:
    out: dict[ProbeFeatures, list[float]] = {}
    for r in testset:
        out.setdefault(r.features, []).append(r.bus_bw)
    return out


def mean_floor_mape(testset: Sequence[ProbeRecord]) -> float:
    """MAPE obtained by predicting each configuration's mean label."""
    total = 0.0
    for labels in _groups(testset).values():
        y = np.asarray(labels)
        total += float(np.sum(np.abs(y.mean() - y) / y))
    return total / len(testset) * 100.0


def irreducible_mape(testset: Sequence[ProbeRecord]) -> float:
    """Smallest MAPE any function of the features can reach on ``testset``.

    Within one configuration ``sum |c - y_i| / y_i`` is minimised by the
    median of the labels weighted by ``1 / y_i``.
    """
    total = 0.0
    for labels in _groups(testset).values():
        y = np.sort(np.asarray(labels))
        wts = 1.0 / y
        cum = np.cumsum(wts)
        c = y[np.searchsorted(cum, 0.5 * cum[-1])]
        total += float(np.sum(np.abs(c - y) / y))
    return total / len(testset) * 100.0


__all__ = [
    "BandwidthModel",
    "FeatureEncoding",
    "NearestNeighbor",
    "NoCommunicationError",
    "ProbeFeatures",
    "ProbeRecord",
    "TrainConfig",
    "Tree",
    "TreeEnsemble",
    "allreduce_time",
    "build_dataset",
    "bus_bandwidth",
    "effective_bytes",
    "evaluate_mape",
    "irreducible_mape",
    "mean_floor_mape",
    "predict_bus_bw",
    "predict_selection_bus_bw",
    "read_probes_csv",
    "train_model",
    "write_probes_csv",
]
