"""Desk-scale labelled datasets, the IGDS binary format, and batching.

IGDS layout (all little-endian)::

    offset  size  field
    0       4     magic  b"IGDS"
    4       2     version (u16, = 1)
    6       2     bounds code (u16): 0 -> [0, 1], 1 -> [-1, 1]
    8       4     count (u32)
    12      4     dim (u32)
    16      4     K (u32)
    20      4     CRC32 of the payload (u32)
    24      8*count*dim   features, f64, row-major
    ...     2*count       labels, u16
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "LabeledDataset",
    "DatasetError",
    "DatasetFormatError",
    "DatasetTruncatedError",
    "DatasetChecksumError",
    "LabelRangeError",
    "gen_two_moons",
    "gen_gaussian_blobs",
    "save_dataset",
    "load_dataset",
    "encode_dataset",
    "decode_dataset",
    "load_csv",
    "save_csv",
    "split",
    "batches",
]

BOUNDS_CODES = {0: (0.0, 1.0), 1: (-1.0, 1.0)}
_MAGIC = b"IGDS"
_HEADER = struct.Struct("<4sHHIIII")


class DatasetError(ValueError):
    pass


class DatasetFormatError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetChecksumError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"
    bounds: tuple[float, float] = (0.0, 1.0)
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise DatasetError("features must be a non-empty (count, dim) matrix")
        if y.shape != (x.shape[0],):
            raise DatasetError("one label per row required")
        if not np.all(np.isfinite(x)):
            raise DatasetError("features must be finite")
        lo, hi = self.bounds
        if np.any(x < lo) or np.any(x > hi):
            raise DatasetError(f"features outside declared bounds {self.bounds}")
        if self.n_classes < 2 or y.min() < 0 or y.max() >= self.n_classes:
            raise LabelRangeError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (self.n_classes == other.n_classes and self.bounds == other.bounds
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))

    def subset(self, idx, split: str | None = None) -> "LabeledDataset":
        return replace(self, features=self.features[idx], labels=self.labels[idx],
                       split=split or self.split)


# canonical two-moons arcs live in [-1, 2] x [-0.5, 1]; the frame adds noise headroom
_MOONS_FRAME = np.array([[-1.5, -1.0], [2.5, 1.5]])


def _moons_rescale(pts: np.ndarray) -> np.ndarray:
    lo, hi = _MOONS_FRAME
    return (pts - lo) / (hi - lo)


def gen_two_moons(count: int, noise: float, seed) -> LabeledDataset:
    """Two interleaving half circles, affinely mapped into ``[0, 1]^2``.

    The map is fixed (it does not depend on the sample); rare noisy points that
    land outside the unit square are clipped onto it.
    """
    if count < 2:
        raise DatasetError("two moons needs count >= 2")
    if noise < 0:
        raise DatasetError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    n0 = count // 2
    n1 = count - n0
    t0 = rng.uniform(0.0, np.pi, size=n0)
    t1 = rng.uniform(0.0, np.pi, size=n1)
    outer = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    inner = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    pts = np.concatenate([outer, inner])
    labels = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    order = rng.permutation(count)
    x = np.clip(_moons_rescale(pts[order]), 0.0, 1.0)
    return LabeledDataset(x, labels[order], 2, provenance={
        "generator": "two_moons", "count": count, "noise": noise, "seed": _seed_repr(seed)})


def gen_gaussian_blobs(count: int, K: int, spread: float, seed) -> LabeledDataset:
    """K isotropic Gaussians centred at ``0.25 + 0.5 e_k`` in ``[0, 1]^K`` (clipped)."""
    if K < 2:
        raise DatasetError("blobs need K >= 2")
    if spread < 0 or count < 1:
        raise DatasetError("spread must be >= 0 and count >= 1")
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % K
    centres = 0.25 + 0.5 * np.eye(K)
    x = centres[labels] + spread * rng.normal(size=(count, K))
    order = rng.permutation(count)
    return LabeledDataset(np.clip(x[order], 0.0, 1.0), labels[order], K, provenance={
        "generator": "gaussian_blobs", "count": count, "K": K, "spread": spread, "seed": _seed_repr(seed)})


def _seed_repr(seed):
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return repr(seed)


def _bounds_code(bounds) -> int:
    for code, b in BOUNDS_CODES.items():
        if tuple(bounds) == b:
            return code
    raise DatasetFormatError(f"bounds {bounds} have no IGDS code")


def encode_dataset(ds: LabeledDataset) -> bytes:
    if ds.n_classes > 0xFFFF:
        raise DatasetFormatError("IGDS stores labels as u16")
    payload = ds.features.astype("<f8").tobytes() + ds.labels.astype("<u2").tobytes()
    head = _HEADER.pack(_MAGIC, 1, _bounds_code(ds.bounds), len(ds), ds.dim, ds.n_classes,
                        zlib.crc32(payload))
    return head + payload


def decode_dataset(buf: bytes, split: str = "train") -> LabeledDataset:
    if len(buf) < _HEADER.size:
        raise DatasetTruncatedError("file shorter than the IGDS header")
    magic, version, bcode, count, dim, K, crc = _HEADER.unpack_from(buf)
    if magic != _MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != 1 or bcode not in BOUNDS_CODES:
        raise DatasetFormatError(f"unsupported version {version} / bounds code {bcode}")
    nfeat = 8 * count * dim
    need = _HEADER.size + nfeat + 2 * count
    if len(buf) < need:
        raise DatasetTruncatedError(f"expected {need} bytes, got {len(buf)}")
    if len(buf) > need:
        raise DatasetFormatError("trailing bytes after IGDS payload")
    payload = buf[_HEADER.size:]
    if zlib.crc32(payload) != crc:
        raise DatasetChecksumError("payload checksum mismatch")
    x = np.frombuffer(payload, dtype="<f8", count=count * dim).astype(np.float64).reshape(count, dim)
    y = np.frombuffer(payload, dtype="<u2", count=count, offset=nfeat).astype(np.int64)
    if count and y.max() >= K:
        raise LabelRangeError(f"label {int(y.max())} out of range for K={K}")
    return LabeledDataset(x, y, K, split=split, bounds=BOUNDS_CODES[bcode],
                          provenance={"file_crc32": crc})


def save_dataset(ds: LabeledDataset, path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path, split: str = "train") -> LabeledDataset:
    return decode_dataset(Path(path).read_bytes(), split=split)


def save_csv(ds: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(ds.dim)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path, n_classes: int | None = None, bounds=(0.0, 1.0)) -> LabeledDataset:
    """Read a ``f0,...,f{d-1},label`` CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetFormatError("empty CSV")
    header, body = rows[0], rows[1:]
    dim = len(header) - 1
    if dim < 1 or header != [f"f{i}" for i in range(dim)] + ["label"]:
        raise DatasetFormatError(f"unexpected CSV header {header}")
    x = np.array([[float(v) for v in r[:dim]] for r in body], dtype=np.float64)
    y = np.array([int(r[dim]) for r in body], dtype=np.int64)
    K = n_classes if n_classes is not None else int(y.max()) + 1
    return LabeledDataset(x.reshape(len(body), dim), y, max(K, 2), bounds=tuple(bounds),
                          provenance={"source": str(path)})


def split(ds: LabeledDataset, fractions: dict[str, float], seed) -> dict[str, LabeledDataset]:
    """Seeded partition into named splits; the last split takes the remainder."""
    if not fractions or any(f < 0 for f in fractions.values()) or sum(fractions.values()) > 1 + 1e-12:
        raise DatasetError("split fractions must be non-negative and sum to at most 1")
    perm = np.random.default_rng(seed).permutation(len(ds))
    out = {}
    start = 0
    names = list(fractions)
    for k, name in enumerate(names):
        stop = len(ds) if k == len(names) - 1 else start + int(round(fractions[name] * len(ds)))
        idx = np.sort(perm[start:stop])
        start = stop
        if idx.size == 0:
            raise DatasetError(f"split {name!r} would be empty")
        sub = ds.subset(idx, split=name)
        out[name] = replace(sub, provenance={**ds.provenance, "split": name, "split_seed": _seed_repr(seed),
                                             "indices_crc32": zlib.crc32(idx.astype("<i8").tobytes())})
    return out


def batches(ds: LabeledDataset, batch_size: int, seed, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled mini-batches for one epoch; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng([int(seed), int(epoch)]).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = perm[start:start + batch_size]
        yield ds.features[idx], ds.labels[idx]
