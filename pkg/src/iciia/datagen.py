"""Synthetic heterogeneous-client feature generation and feature-file IO.

Class prototypes are random unit vectors; each sample is its class
prototype plus isotropic Gaussian noise. A configurable fraction of
clients ("restricted") draw their classes from a single parent category
(classes are partitioned into contiguous groups); the remaining clients
sample uniformly from all classes, so at heterogeneity 0 the population
is homogeneous and there is nothing client-specific to adapt to.

Feature files are UTF-8 CSV with header ``client_id,label,f0,...,f{D-1}``;
feature values are serialized with shortest round-trip-exact float32
formatting.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .model import AttentionWindow

SPLIT_MODES = ("by-client", "within-client")


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the synthetic population.

    In by-client mode, train/val/test hold disjoint client pools of the
    given sizes, each client with ``samples_per_client`` records. In
    within-client mode, ``clients_train`` clients are shared across all
    three roles, with ``samples_per_client`` / ``val_samples_per_client``
    / ``test_samples_per_client`` records per role.
    """

    num_classes: int = 100
    num_parent_categories: int = 10
    feature_dim: int = 64
    clients_train: int = 200
    clients_val: int = 50
    clients_test: int = 50
    samples_per_client: int = 40
    min_classes_per_client: int = 5
    max_classes_per_client: int = 15
    noise_sigma: float = 0.3
    heterogeneity_ratio: float = 1.0
    seed: int = 0
    split_mode: str = "by-client"
    val_samples_per_client: int = 10
    test_samples_per_client: int = 10

    def __post_init__(self):
        if self.num_classes < 1 or self.num_parent_categories < 1:
            raise ConfigError("num_classes and num_parent_categories must be positive")
        if self.num_classes % self.num_parent_categories != 0:
            raise ConfigError(f"num_classes {self.num_classes} is not divisible by "
                              f"num_parent_categories {self.num_parent_categories}")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        for name in ("clients_train", "clients_val", "clients_test", "samples_per_client",
                     "val_samples_per_client", "test_samples_per_client"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not (1 <= self.min_classes_per_client <= self.max_classes_per_client):
            raise ConfigError("need 1 <= min_classes_per_client <= max_classes_per_client")
        if self.min_classes_per_client > self.num_classes:
            raise ConfigError("min_classes_per_client exceeds num_classes")
        if not (0.0 <= self.heterogeneity_ratio <= 1.0):
            raise ConfigError(f"heterogeneity_ratio must be in [0, 1], "
                              f"got {self.heterogeneity_ratio}")
        if self.split_mode not in SPLIT_MODES:
            raise ConfigError(f"split_mode must be one of {SPLIT_MODES}, got {self.split_mode!r}")
        if (self.heterogeneity_ratio > 0
                and self.min_classes_per_client > self.num_classes // self.num_parent_categories):
            raise ConfigError(
                f"min_classes_per_client {self.min_classes_per_client} exceeds the "
                f"{self.num_classes // self.num_parent_categories} classes of one parent "
                f"category; a category-restricted client cannot draw that many")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


@dataclass
class FeatureRecord:
    """One labeled feature vector owned by one client."""

    client_id: str
    label: int
    features: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, FeatureRecord)
                and self.client_id == other.client_id
                and self.label == other.label
                and np.array_equal(self.features, other.features))


@dataclass
class ClientSet:
    """Per-client record lists for one role of the dataset."""

    clients: dict[str, list[FeatureRecord]] = field(default_factory=dict)
    role: str = ""
    split_mode: str = "by-client"

    def client_ids(self) -> list[str]:
        return sorted(self.clients)

    def num_records(self) -> int:
        return sum(len(r) for r in self.clients.values())

    def feature_dim(self) -> int:
        for recs in self.clients.values():
            if recs:
                return len(recs[0].features)
        raise ConfigError("client set holds no records")

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """All records pooled: (features (N, D), labels (N,)), client order sorted."""
        feats, labels = [], []
        for cid in self.client_ids():
            for rec in self.clients[cid]:
                feats.append(rec.features)
                labels.append(rec.label)
        if not feats:
            raise ConfigError("client set holds no records")
        return np.stack(feats), np.asarray(labels, dtype=np.int64)

    def records_equal(self, other: "ClientSet") -> bool:
        if self.client_ids() != other.client_ids():
            return False
        return all(self.clients[c] == other.clients[c] for c in self.client_ids())


def _draw_client_labels(rng: np.random.Generator, spec: SyntheticSpec,
                        restricted: bool, n_samples: int) -> np.ndarray:
    c, g = spec.num_classes, spec.num_parent_categories
    per_cat = c // g
    if restricted:
        cat = int(rng.integers(g))
        pool = np.arange(cat * per_cat, (cat + 1) * per_cat)
        k_hi = min(spec.max_classes_per_client, per_cat)
        k = int(rng.integers(spec.min_classes_per_client, k_hi + 1))
        classes = rng.choice(pool, size=k, replace=False)
        return rng.choice(classes, size=n_samples)
    # homogeneous client: every sample uniform over all classes
    return rng.integers(0, c, size=n_samples)


def generate(spec: SyntheticSpec):
    """Build (train, val, test) client sets plus the class prototypes.

    Deterministic for a fixed spec. Within each role the first
    round(heterogeneity_ratio * n) clients are the category-restricted ones.
    """
    rng = np.random.default_rng(spec.seed)
    protos = rng.normal(size=(spec.num_classes, spec.feature_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)

    def make_records(cid: str, restricted: bool, n_samples: int) -> list[FeatureRecord]:
        labels = _draw_client_labels(rng, spec, restricted, n_samples)
        noise = rng.normal(scale=spec.noise_sigma,
                           size=(n_samples, spec.feature_dim)) if spec.noise_sigma > 0 \
            else np.zeros((n_samples, spec.feature_dim))
        feats = (protos[labels] + noise).astype(np.float32)
        return [FeatureRecord(cid, int(labels[i]), feats[i]) for i in range(n_samples)]

    if spec.split_mode == "by-client":
        sets = {}
        start = 0
        for role, count in (("train", spec.clients_train), ("val", spec.clients_val),
                            ("test", spec.clients_test)):
            n_restricted = int(round(spec.heterogeneity_ratio * count))
            clients = {}
            for j in range(count):
                cid = f"c{start + j:05d}"
                clients[cid] = make_records(cid, j < n_restricted, spec.samples_per_client)
            sets[role] = ClientSet(clients, role, spec.split_mode)
            start += count
        return sets["train"], sets["val"], sets["test"], protos

    # within-client: the same clients appear in all roles with disjoint records
    count = spec.clients_train
    n_restricted = int(round(spec.heterogeneity_ratio * count))
    per_role: dict[str, dict[str, list[FeatureRecord]]] = {"train": {}, "val": {}, "test": {}}
    role_sizes = (("train", spec.samples_per_client), ("val", spec.val_samples_per_client),
                  ("test", spec.test_samples_per_client))
    for j in range(count):
        cid = f"c{j:05d}"
        restricted = j < n_restricted
        for role, n_samples in role_sizes:
            per_role[role][cid] = make_records(cid, restricted, n_samples)
    return (ClientSet(per_role["train"], "train", spec.split_mode),
            ClientSet(per_role["val"], "val", spec.split_mode),
            ClientSet(per_role["test"], "test", spec.split_mode),
            protos)


def _format_f32(v: np.float32) -> str:
    return np.format_float_positional(np.float32(v), unique=True)


def write_features(path, client_set: ClientSet):
    """Write a client set as CSV; float32 values round-trip exactly."""
    path = Path(path)
    d = client_set.feature_dim()
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "label"] + [f"f{i}" for i in range(d)])
        for cid in client_set.client_ids():
            for rec in client_set.clients[cid]:
                writer.writerow([rec.client_id, rec.label]
                                + [_format_f32(v) for v in rec.features])


def read_features(path, role: str = "", split_mode: str = "by-client") -> ClientSet:
    """Parse a feature CSV back into a ClientSet.

    Raises FormatError naming the offending line for malformed rows,
    mismatched widths, or an empty file.
    """
    path = Path(path)
    clients: dict[str, list[FeatureRecord]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: empty feature file")
        if len(header) < 3 or header[0] != "client_id" or header[1] != "label":
            raise FormatError(f"{path}: line 1: bad header {header[:3]}...")
        d = len(header) - 2
        expected = [f"f{i}" for i in range(d)]
        if header[2:] != expected:
            raise FormatError(f"{path}: line 1: feature columns must be f0..f{d - 1}")
        n_rows = 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise FormatError(f"{path}: line {lineno}: expected {d + 2} columns, "
                                  f"got {len(row)}")
            cid = row[0]
            try:
                label = int(row[1])
                feats = np.array([np.float32(v) for v in row[2:]], dtype=np.float32)
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from exc
            clients.setdefault(cid, []).append(FeatureRecord(cid, label, feats))
            n_rows += 1
        if n_rows == 0:
            raise FormatError(f"{path}: no data rows")
    return ClientSet(clients, role, split_mode)


def make_labeled_windows(records: list[FeatureRecord], window_size: int,
                         seed: int) -> list[tuple[AttentionWindow, np.ndarray]]:
    """Partition one client's records into (window, labels) pairs for one epoch pass.

    Records are sampled without replacement; the final window holds the
    remainder (all rows valid, every row a training target). The union of
    all window rows equals the client's record multiset.
    """
    if window_size < 1:
        raise ConfigError(f"window_size must be >= 1, got {window_size}")
    if not records:
        return []
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    out = []
    for s in range(0, len(order), window_size):
        chunk = order[s:s + window_size]
        feats = np.stack([records[i].features for i in chunk])
        labels = np.asarray([records[i].label for i in chunk], dtype=np.int64)
        out.append((AttentionWindow(features=feats), labels))
    return out


def make_windows(records: list[FeatureRecord], window_size: int,
                 seed: int) -> list[AttentionWindow]:
    """Windows of :func:`make_labeled_windows` without the label arrays."""
    return [w for w, _ in make_labeled_windows(records, window_size, seed)]


def write_dataset(out_dir, train: ClientSet, val: ClientSet, test: ClientSet,
                  spec: SyntheticSpec):
    """Write train/val/test CSVs plus a JSON sidecar echoing the spec."""
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, cs in (("train", train), ("val", val), ("test", test)):
        write_features(out / f"{name}.csv", cs)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")


def load_dataset(data_dir):
    """Read back a directory produced by :func:`write_dataset`."""
    import json

    data = Path(data_dir)
    spec_path = data / "spec.json"
    if not spec_path.exists():
        raise FormatError(f"{data}: missing spec.json")
    spec = SyntheticSpec.from_dict(json.loads(spec_path.read_text()))
    sets = [read_features(data / f"{n}.csv", role=n, split_mode=spec.split_mode)
            for n in ("train", "val", "test")]
    return sets[0], sets[1], sets[2], spec
