"""Datasets, IDX files, client partitions and the alignment dataset."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import SeededRng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
TEST_FRACTION = 0.2

SETTINGS = {"small": 50, "medium": 100, "full": 2500}


class IdxFormatError(ValueError):
    pass


class InsufficientData(ValueError):
    pass


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int
    indices: np.ndarray | None = None  # row ids in the source pool

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            self.features = self.features.reshape(self.features.shape[0], -1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels have different row counts")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")
        if self.indices is None:
            self.indices = np.arange(self.labels.shape[0])

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def subset(self, rows: np.ndarray) -> "LabeledDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledDataset(self.features[rows], self.labels[rows], self.classes,
                              self.indices[rows])


@dataclass(frozen=True)
class DataSetting:
    name: str

    def __post_init__(self):
        if self.name not in SETTINGS:
            raise ValueError(f"unknown data setting {self.name!r}; expected one of {list(SETTINGS)}")

    @property
    def per_class(self) -> int:
        return SETTINGS[self.name]


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    classes_per_client: int | str = "all"
    per_class: int | str | None = None  # None: take it from the DataSetting
    mode: str = "disjoint_class_noniid"
    allow_class_overlap: bool = True

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.mode not in ("disjoint_class_noniid", "iid"):
            raise ValueError(f"unknown partition mode {self.mode!r}")


@dataclass
class ClientShard:
    client_id: int
    classes: list[int]
    train: LabeledDataset
    test: LabeledDataset


@dataclass
class Partition:
    seed: int
    mode: str
    shards: list[ClientShard]
    unused: np.ndarray  # pool rows given to no client

    def used_indices(self) -> np.ndarray:
        parts = [s.train.indices for s in self.shards] + [s.test.indices for s in self.shards]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "mode": self.mode,
            "clients": [
                {"id": s.client_id, "classes": list(s.classes),
                 "train_indices_count": len(s.train), "test_indices_count": len(s.test)}
                for s in self.shards
            ],
        }


@dataclass
class AlignmentDataset:
    inputs: np.ndarray
    source: str = "held-out-pool"
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return self.inputs.shape[0]


# --------------------------------------------------------------------------
# IDX


def _open(path):
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(buf: bytes, expected_magic: int, path) -> np.ndarray:
    if len(buf) < 8:
        raise IdxFormatError(f"{path}: not an IDX file (too short)")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: not an IDX file (magic {magic:#010x}, "
                             f"expected {expected_magic:#010x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, buf[4:header])
    count = math.prod(dims)
    if len(buf) - header < count:
        raise IdxFormatError(f"{path}: truncated IDX file ({len(buf) - header} of {count} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, classes: int = 10) -> LabeledDataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _parse_idx(_open(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_open(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(feats, labels.astype(np.int64), classes)


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    """Write a uint8 array as IDX (magic 0x0803 for 3-d, 0x0801 for 1-d)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x00000800 | arr.ndim) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    payload = header + arr.tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    path.write_bytes(gzip.compress(payload, mtime=0) if compress else payload)


def write_mnist_idx(dataset: LabeledDataset, images_path, labels_path, side: int = 28) -> None:
    pix = np.rint(dataset.features * 255.0).astype(np.uint8).reshape(len(dataset), side, side)
    write_idx(images_path, pix)
    write_idx(labels_path, dataset.labels.astype(np.uint8))


# --------------------------------------------------------------------------
# synthetic data


def blob_means(classes: int, dims: int, separation: float) -> np.ndarray:
    """Class centres at pairwise distance exactly ``separation`` when dims >= classes."""
    means = np.zeros((classes, dims))
    if dims >= classes:
        means[np.arange(classes), np.arange(classes)] = separation / math.sqrt(2.0)
    else:
        means[:, 0] = separation * np.arange(classes)
    return means


def gen_synthetic_blobs(classes: int, dims: int, per_class: int, separation: float,
                        seed: int) -> LabeledDataset:
    """Isotropic Gaussian blobs with variance 0.25 around separated centres."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = SeededRng(seed).stream("blobs")
    means = blob_means(classes, dims, separation)
    labels = np.repeat(np.arange(classes), per_class)
    feats = means[labels] + 0.5 * rng.normal((labels.shape[0], dims))
    return LabeledDataset(feats, labels, classes)


# --------------------------------------------------------------------------
# partitioning


def _client_classes(spec: PartitionSpec, classes: int, rng: SeededRng) -> list[list[int]]:
    if spec.mode == "iid" or spec.classes_per_client == "all":
        return [list(range(classes)) for _ in range(spec.n_clients)]
    k = int(spec.classes_per_client)
    if not 1 <= k <= classes:
        raise ValueError(f"classes_per_client={k} must lie in [1, {classes}]")
    if not spec.allow_class_overlap:
        if spec.n_clients * k > classes:
            raise InsufficientData(
                f"{spec.n_clients} clients x {k} classes exceed the {classes} available "
                f"without class overlap")
        perm = rng.stream("classes").permutation(classes)
        return [sorted(int(c) for c in perm[i * k:(i + 1) * k]) for i in range(spec.n_clients)]
    return [sorted(int(c) for c in rng.stream("classes", i).choice(classes, k, replace=False))
            for i in range(spec.n_clients)]


def partition(dataset: LabeledDataset, spec: PartitionSpec, setting: DataSetting | None,
              seed: int) -> Partition:
    """Split a labelled pool into per-client train/test shards.

    Every (client, class) allocation is split 80/20 into train and test, with
    ``per_class`` train rows. Clients that pick the same class receive
    disjoint instances of it.
    """
    rng = SeededRng(seed).stream("partition")
    per_class = spec.per_class if spec.per_class is not None else (
        setting.per_class if setting is not None else "all")
    owned = _client_classes(spec, dataset.classes, rng)
    owners: dict[int, list[int]] = {}
    for cid, cls in enumerate(owned):
        for c in cls:
            owners.setdefault(c, []).append(cid)

    train_rows: list[list[np.ndarray]] = [[] for _ in owned]
    test_rows: list[list[np.ndarray]] = [[] for _ in owned]
    taken = np.zeros(len(dataset), dtype=bool)
    for c in sorted(owners):
        pool = np.flatnonzero(dataset.labels == c)
        pool = pool[rng.stream("shuffle", c).permutation(pool.shape[0])]
        who = owners[c]
        if per_class == "all":
            alloc = pool.shape[0] // len(who)
            n_test = int(round(alloc * TEST_FRACTION))
            n_train = alloc - n_test
        else:
            n_train = int(per_class)
            n_test = int(round(n_train * TEST_FRACTION / (1.0 - TEST_FRACTION)))
        need = (n_train + n_test) * len(who)
        if need > pool.shape[0] or n_train < 1:
            raise InsufficientData(
                f"class {c}: {len(who)} client(s) need {need} instances "
                f"({n_train} train + {n_test} test each) but only {pool.shape[0]} exist")
        for j, cid in enumerate(who):
            chunk = pool[j * (n_train + n_test):(j + 1) * (n_train + n_test)]
            test_rows[cid].append(chunk[:n_test])
            train_rows[cid].append(chunk[n_test:])
            taken[chunk] = True

    shards = []
    for cid, cls in enumerate(owned):
        tr = np.sort(np.concatenate(train_rows[cid]))
        te = np.sort(np.concatenate(test_rows[cid]))
        shards.append(ClientShard(cid, cls, dataset.subset(tr), dataset.subset(te)))
    return Partition(seed, spec.mode, shards, np.flatnonzero(~taken))


def build_alignment_dataset(pool: LabeledDataset, size: int, seed: int,
                            exclude: np.ndarray | None = None,
                            source: str = "held-out-pool") -> AlignmentDataset:
    """Draw ``size`` unlabeled inputs from ``pool`` avoiding the ``exclude`` rows."""
    if size <= 0:
        raise ValueError("empty AD")
    exclude = np.zeros(0, dtype=np.int64) if exclude is None else np.asarray(exclude, np.int64)
    candidates = np.setdiff1d(np.arange(len(pool)), exclude)
    if candidates.shape[0] < size:
        raise InsufficientData(f"AD of size {size} requested but only "
                               f"{candidates.shape[0]} held-out instances remain")
    rows = np.sort(SeededRng(seed).stream("ad").choice(candidates, size, replace=False))
    chosen = pool.indices[rows]
    if np.intersect1d(chosen, pool.indices[exclude]).size:
        raise ValueError("AD overlaps client shards")
    return AlignmentDataset(pool.features[rows].copy(), source, chosen)


def synthetic_alignment_dataset(classes: int, dims: int, size: int, separation: float,
                                seed: int) -> AlignmentDataset:
    """Fresh unlabeled draws from the blob generator (disjoint by construction)."""
    if size <= 0:
        raise ValueError("empty AD")
    per = -(-size // classes)
    blobs = gen_synthetic_blobs(classes, dims, per, separation, seed)
    rows = SeededRng(seed).stream("ad").choice(len(blobs), size, replace=False)
    return AlignmentDataset(blobs.features[np.sort(rows)], "synthetic")
