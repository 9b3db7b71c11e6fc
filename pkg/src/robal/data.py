"""Long-tailed / balanced datasets, the RBLT binary format and batch streams."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from robal.errors import BadMagicError, FormatError, TruncatedError, VersionError

RBLT_MAGIC = b"RBLT"
RBLT_VERSION = 1


class LabelRangeError(FormatError):
    """A stored label is not below the declared class count."""


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Samples in [0, 1] with integer labels in ``[0, num_classes)``.

    ``samples`` has shape ``(N, *extents)``.  Every class must be present.
    """

    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if samples.shape[0] != labels.shape[0]:
            raise ValueError(f"{samples.shape[0]} samples but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if samples.size and (samples.min() < 0.0 or samples.max() > 1.0):
            raise ValueError("sample values must lie in [0, 1]")
        counts = np.bincount(labels, minlength=self.num_classes)
        if counts.size == 0 or counts.min() < 1:
            raise ValueError(f"every class needs at least one sample, got counts {counts.tolist()}")
        samples.flags.writeable = False
        labels.flags.writeable = False
        counts.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_counts", counts)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(self.samples[index], self.labels[index], self.num_classes)


@dataclass(frozen=True)
class ImbalanceProfile:
    num_classes: int
    n_max: int
    imbalance_ratio: float

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.imbalance_ratio < 1:
            raise ValueError("imbalance ratio must be >= 1")
        if self.n_max < self.imbalance_ratio:
            raise ValueError("n_max must be >= imbalance ratio so that n_min >= 1")


def make_longtail_counts(profile: ImbalanceProfile) -> np.ndarray:
    """Exponentially decaying counts ``round(n_max * IR**(-i/(C-1)))``."""
    c = profile.num_classes
    counts = np.array([
        int(round(profile.n_max * profile.imbalance_ratio ** (-i / (c - 1)))) for i in range(c)
    ], dtype=np.int64)
    if counts.min() < 1:
        raise ValueError(f"profile {profile} yields an empty class")
    return counts


LAYOUTS = ("ring", "simplex")


def class_means(num_classes: int, dim: int, layout: str = "ring") -> np.ndarray:
    """Unit-norm class centres, equally spaced.

    ``ring`` puts them at equal angles on a great circle spanned by the first
    two coordinates, so each class has two close neighbours and the remaining
    ``dim - 2`` coordinates carry only noise.  ``simplex`` uses the vertices of
    a regular simplex centred at the origin (all pairwise distances equal),
    which needs ``dim >= num_classes``.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    means = np.zeros((num_classes, dim))
    if layout == "simplex":
        if num_classes > dim:
            raise ValueError("simplex layout needs dim >= num_classes")
        if num_classes == 1:
            means[0, 0] = 1.0
            return means
        means[:, :num_classes] = np.eye(num_classes) - 1.0 / num_classes
        return means / np.linalg.norm(means, axis=1, keepdims=True)
    if layout != "ring":
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    means[:, 0] = np.cos(angles)
    means[:, 1] = np.sin(angles)
    return means


def squash(values: np.ndarray) -> np.ndarray:
    """Fixed affine map from the synthetic feature space into [0, 1]."""
    return np.clip(0.5 + 0.25 * values, 0.0, 1.0)


def synth_gaussians(num_classes: int, dim: int, spread: float, counts: Sequence[int],
                    seed: int, layout: str = "ring") -> LabeledDataset:
    """Isotropic Gaussian blobs around :func:`class_means`, squashed into [0, 1]."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (num_classes,):
        raise ValueError(f"counts must have length {num_classes}")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    means = class_means(num_classes, dim, layout)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), counts)
    noise = rng.standard_normal((labels.size, dim)) * spread
    return LabeledDataset(squash(means[labels] + noise), labels, num_classes)


def make_small_balanced(lt: LabeledDataset, base: LabeledDataset, seed: int) -> LabeledDataset:
    """Uniform subset of ``base`` with (up to C-1 fewer) as many samples as ``lt``."""
    c = lt.num_classes
    per_class = len(lt) // c
    if base.class_counts.min() < per_class:
        raise ValueError(f"base set has {base.class_counts.min()} samples in its smallest class, "
                         f"need {per_class}")
    rng = np.random.default_rng(seed)
    picks = []
    for k in range(c):
        members = np.flatnonzero(base.labels == k)
        picks.append(np.sort(rng.choice(members, size=per_class, replace=False)))
    return base.subset(np.concatenate(picks))


# ---------------------------------------------------------------------------
# batch streams
# ---------------------------------------------------------------------------

def plain_batches(ds: LabeledDataset, batch: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One shuffled pass over ``ds`` in index batches."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    order = rng.permutation(len(ds))
    for start in range(0, len(ds), batch):
        yield order[start:start + batch]


def class_aware_batches(ds: LabeledDataset, batch: int, seed: int) -> Iterator[np.ndarray]:
    """Endless stream of index batches; each slot picks a class uniformly, then a member."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    rng = np.random.default_rng(seed)
    members = [np.flatnonzero(ds.labels == k) for k in range(ds.num_classes)]
    sizes = np.array([m.size for m in members])
    while True:
        cls = rng.integers(ds.num_classes, size=batch)
        pos = np.floor(rng.random(batch) * sizes[cls]).astype(np.int64)
        yield np.array([members[k][p] for k, p in zip(cls, pos)], dtype=np.int64)


# ---------------------------------------------------------------------------
# RBLT binary format
# ---------------------------------------------------------------------------

def save_binary(ds: LabeledDataset, path) -> None:
    """Write ``ds`` as RBLT; pixel values are quantized to bytes."""
    extents = ds.sample_shape
    if ds.num_classes > 0xFFFF:
        raise ValueError("RBLT stores labels as u16")
    header = bytearray(RBLT_MAGIC)
    header += struct.pack("<IIQI", RBLT_VERSION, ds.num_classes, len(ds), len(extents))
    header += struct.pack(f"<{len(extents)}I", *extents)
    pixels = np.rint(ds.samples.reshape(len(ds), -1) * 255.0).astype(np.uint8)
    record = np.dtype([("label", "<u2"), ("pixels", "u1", (pixels.shape[1],))])
    body = np.empty(len(ds), dtype=record)
    body["label"] = ds.labels
    body["pixels"] = pixels
    Path(path).write_bytes(bytes(header) + body.tobytes())


def load_binary(path) -> LabeledDataset:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != RBLT_MAGIC:
        raise BadMagicError(f"{path}: not an RBLT file")
    fixed = struct.calcsize("<IIQI")
    if len(buf) < 4 + fixed:
        raise TruncatedError(f"{path}: header truncated")
    version, num_classes, n, d = struct.unpack_from("<IIQI", buf, 4)
    if version != RBLT_VERSION:
        raise VersionError(f"{path}: unsupported RBLT version {version}")
    off = 4 + fixed
    if len(buf) < off + 4 * d:
        raise TruncatedError(f"{path}: extents truncated")
    extents = struct.unpack_from(f"<{d}I", buf, off)
    off += 4 * d
    per = math.prod(extents)
    need = n * (2 + per)
    if len(buf) - off < need:
        raise TruncatedError(f"{path}: expected {need} payload bytes, found {len(buf) - off}")
    record = np.dtype([("label", "<u2"), ("pixels", "u1", (per,))])
    body = np.frombuffer(buf, dtype=record, count=n, offset=off)
    labels = body["label"].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise LabelRangeError(f"{path}: label {labels.max()} >= class count {num_classes}")
    samples = body["pixels"].astype(np.float64).reshape((n, *extents)) / 255.0
    return LabeledDataset(samples, labels, num_classes)
