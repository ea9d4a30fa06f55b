"""Dataset ingestion, vertical splitting and synthetic generators.

Every loader returns rows with l2 norm at most 1 and labels in {-1, +1}.
"""
from __future__ import annotations

import csv
import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numeric import clip_norms, sample_continuous

DATA_DIR_ENV = "VFLSIM_DATA_DIR"
CACHE_MAGIC = b"VFLSIMDS"
CACHE_VERSION = 1

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    dims: tuple[int, ...]
    label_party: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) < 2:
            raise DataError("a vertical split needs at least two parties")
        if any(d < 0 for d in self.dims):
            raise DataError("party dimensions must be non-negative")
        if not 0 <= self.label_party < len(self.dims):
            raise DataError("label party index out of range")

    @classmethod
    def half(cls, d: int) -> "SplitSpec":
        return cls((d // 2, d - d // 2))

    @property
    def parties(self) -> int:
        return len(self.dims)

    def slices(self) -> list[slice]:
        bounds = np.cumsum([0, *self.dims])
        return [slice(int(bounds[k]), int(bounds[k + 1])) for k in range(len(self.dims))]


@dataclass(frozen=True)
class PartyView:
    party: int
    features: np.ndarray
    labels: np.ndarray | None


@dataclass(frozen=True)
class VerticalDataset:
    X: np.ndarray
    y: np.ndarray
    split: SplitSpec
    X_test: np.ndarray | None = None
    y_test: np.ndarray | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise DataError("X must be n x d with one label per row")
        if sum(self.split.dims) != self.X.shape[1]:
            raise DataError(f"split dims {self.split.dims} do not sum to d = {self.X.shape[1]}")
        for labels in (self.y, self.y_test):
            if labels is not None and not np.all(np.abs(labels) == 1):
                raise DataError("labels must be -1 or +1")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def features(self, party: int, test: bool = False) -> np.ndarray:
        X = self.X_test if test else self.X
        return X[:, self.split.slices()[party]]

    def with_split(self, spec: SplitSpec) -> "VerticalDataset":
        return VerticalDataset(self.X, self.y, spec, self.X_test, self.y_test, self.name, dict(self.meta))

    def subsample(self, n: int, seed) -> "VerticalDataset":
        if n > self.n:
            raise DataError(f"cannot subsample {n} rows from {self.n}")
        idx = np.sort(np.random.default_rng(seed).choice(self.n, n, replace=False))
        meta = dict(self.meta, subsample=n, subsample_seed=seed)
        return VerticalDataset(self.X[idx], self.y[idx], self.split, self.X_test, self.y_test, self.name, meta)


def vertical_split(dataset: VerticalDataset, spec: SplitSpec | None = None) -> list[PartyView]:
    spec = spec or dataset.split
    if sum(spec.dims) != dataset.d:
        raise DataError(f"split dims {spec.dims} do not sum to d = {dataset.d}")
    return [
        PartyView(
            party=k,
            features=dataset.X[:, sl],
            labels=dataset.y if k == spec.label_party else None,
        )
        for k, sl in enumerate(spec.slices())
    ]


def _open_maybe_gz(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int, sha256: str | None = None) -> np.ndarray:
    path = Path(path)
    raw = _open_maybe_gz(path)
    if sha256 is not None and hashlib.sha256(raw).hexdigest() != sha256:
        raise DataError(f"checksum mismatch for {path.name}")
    if len(raw) < 4:
        raise DataError(f"{path.name}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise DataError(f"{path.name}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path.name}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataError(f"{path.name}: expected {count} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def data_dir(explicit=None) -> Path:
    value = explicit or os.environ.get(DATA_DIR_ENV)
    if not value:
        raise DataError(f"no data directory given and ${DATA_DIR_ENV} is unset")
    return Path(value)


def mnist_paths(root=None) -> dict[str, Path]:
    """Locate the four IDX files under ``root`` or ``root/mnist`` (optionally gzipped)."""
    base = data_dir(root)
    found = {}
    for key, stem in MNIST_FILES.items():
        for folder in (base, base / "mnist"):
            for name in (stem, stem + ".gz"):
                if (folder / name).exists():
                    found[key] = folder / name
                    break
            if key in found:
                break
        else:
            raise DataError(f"missing MNIST file {stem} under {base}")
    return found


def _mnist_binary(images: np.ndarray, labels: np.ndarray, normalize: bool):
    keep = labels <= 1
    X = images[keep].reshape(int(keep.sum()), -1).astype(float) / 255.0
    y = np.where(labels[keep] == 0, -1.0, 1.0)
    if normalize:
        X = clip_norms(X, axis=1)
    return X, y


def load_mnist_binary(paths=None, normalize: bool = True, checksums: dict | None = None) -> VerticalDataset:
    """Digits 0 and 1 from MNIST; digit 0 is labelled -1.

    Pixels are scaled to [0, 1] and then each row is divided by max(1, norm).
    ``normalize=False`` keeps the raw [0, 1] pixels.
    """
    if paths is None or isinstance(paths, (str, os.PathLike)):
        paths = mnist_paths(paths)
    checksums = checksums or {}
    arrays = {
        key: read_idx(
            paths[key],
            IDX_IMAGES_MAGIC if key.endswith("images") else IDX_LABELS_MAGIC,
            checksums.get(key),
        )
        for key in MNIST_FILES
    }
    for part in ("train", "test"):
        if arrays[f"{part}_images"].shape[0] != arrays[f"{part}_labels"].shape[0]:
            raise DataError(f"{part} image and label counts differ")
    X, y = _mnist_binary(arrays["train_images"], arrays["train_labels"], normalize)
    Xt, yt = _mnist_binary(arrays["test_images"], arrays["test_labels"], normalize)
    return VerticalDataset(X, y, SplitSpec.half(X.shape[1]), Xt, yt, name="mnist01",
                           meta={"normalize": normalize})


CREDIT_FEATURES = 23


def load_credit(path, seed=0, n_test: int | None = None) -> VerticalDataset:
    """UCI default-of-credit-card CSV: ID, 23 features, binary default flag.

    Leading header rows are skipped and the ID column is dropped. Features are
    standardized over all rows and then norm-clipped. Default 1 maps to +1.
    """
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or not "".join(rec).strip():
                continue
            if not rows and not _is_number(rec[0]):
                continue  # header
            if len(rec) != CREDIT_FEATURES + 2:
                raise DataError(f"line {lineno}: expected {CREDIT_FEATURES + 2} columns, got {len(rec)}")
            try:
                rows.append([float(v) for v in rec[1:]])
            except ValueError:
                raise DataError(f"line {lineno}: malformed numeric field") from None
    if not rows:
        raise DataError("credit file holds no data rows")
    data = np.asarray(rows)
    X, flag = data[:, :CREDIT_FEATURES], data[:, CREDIT_FEATURES]
    if not np.all(np.isin(flag, (0.0, 1.0))):
        raise DataError("label column must be 0 or 1")
    std = X.std(axis=0)
    X = (X - X.mean(axis=0)) / np.where(std > 0, std, 1.0)
    X = clip_norms(X, axis=1)
    y = np.where(flag == 1.0, 1.0, -1.0)
    n = len(y)
    n_test = n // 10 if n_test is None else n_test
    perm = np.random.default_rng(seed).permutation(n)
    test, train = perm[:n_test], perm[n_test:]
    return VerticalDataset(X[train], y[train], SplitSpec.half(CREDIT_FEATURES), X[test], y[test],
                           name="credit", meta={"split_seed": seed})


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def synth_continuous(n: int, d: int, spec: SplitSpec | None = None, seed=0, n_test: int = 0) -> VerticalDataset:
    """Gaussian features clipped to the unit ball; labels from a random linear teacher."""
    if n < 1 or d < 1:
        raise DataError("n and d must be positive")
    spec = spec or SplitSpec.half(d)
    X = sample_continuous(d, n + n_test, seed).T
    teacher = np.random.default_rng([seed, 1]).standard_normal(d)
    y = np.where(X @ teacher >= 0, 1.0, -1.0)
    return VerticalDataset(X[:n], y[:n], spec, X[n:] if n_test else None, y[n:] if n_test else None,
                           name="synthetic", meta={"seed": seed})


def dataset_bytes(ds: VerticalDataset) -> bytes:
    """Versioned binary form: magic, version, JSON header, then float64 arrays."""
    arrays = [("X", ds.X), ("y", ds.y)]
    if ds.X_test is not None:
        arrays += [("X_test", ds.X_test), ("y_test", ds.y_test)]
    header = {
        "name": ds.name,
        "dims": list(ds.split.dims),
        "label_party": ds.split.label_party,
        "meta": ds.meta,
        "arrays": [[k, list(a.shape)] for k, a in arrays],
    }
    head = json.dumps(header, sort_keys=True).encode()
    out = [CACHE_MAGIC, struct.pack("<HI", CACHE_VERSION, len(head)), head]
    out += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays]
    return b"".join(out)


def dataset_from_bytes(raw: bytes) -> VerticalDataset:
    if raw[:8] != CACHE_MAGIC:
        raise DataError("not a dataset cache file")
    version, hlen = struct.unpack("<HI", raw[8:14])
    if version != CACHE_VERSION:
        raise DataError(f"unsupported cache version {version}")
    header = json.loads(raw[14 : 14 + hlen])
    pos = 14 + hlen
    arrays = {}
    for key, shape in header["arrays"]:
        size = int(np.prod(shape)) * 8
        if pos + size > len(raw):
            raise DataError("truncated dataset cache")
        arrays[key] = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
        pos += size
    spec = SplitSpec(tuple(header["dims"]), header["label_party"])
    return VerticalDataset(arrays["X"], arrays["y"], spec, arrays.get("X_test"), arrays.get("y_test"),
                           name=header["name"], meta=header["meta"])


def save_dataset(ds: VerticalDataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path) -> VerticalDataset:
    return dataset_from_bytes(Path(path).read_bytes())
