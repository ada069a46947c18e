"""Embedding datasets: in-memory representation, FEDF binary format, synthetic generator.

A FeatureDataset is the unit every other module operates on: frozen-extractor
embeddings of one domain plus integer class labels. The FEDF format stores them
bit-exactly; the synthetic generator produces Gaussian class clusters with a
controllable geometry knob (separability) and an orthogonal-affine domain shift.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

FEDF_MAGIC = b"FEDF"
FEDF_VERSION = 1

_HEADER = struct.Struct("<4sIII")  # magic, version, dim, num_classes
_DOMAIN_LEN = struct.Struct("<H")
_COUNT = struct.Struct("<Q")


class FedfError(ValueError):
    """Base for FEDF parse failures."""


class BadMagicError(FedfError):
    pass


class VersionMismatchError(FedfError):
    pass


class TruncatedFileError(FedfError):
    pass


class LabelRangeError(FedfError):
    pass


class EmptyDatasetError(ValueError):
    pass


class FeatureDataset:
    """Labeled embedding vectors of one domain.

    ``vectors`` is float32 [N, dim], ``labels`` int64 [N] with values in
    [0, num_classes). Instances are immutable after construction and safe to
    share across threads.

    Every read of the ``labels`` property bumps ``label_reads``. Federated
    adaptation asserts that counter never moves on client train shards, which
    is how the no-target-labels contract is enforced.
    """

    def __init__(self, dim, num_classes, domain_id, vectors, labels):
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        if vectors.ndim != 2 or vectors.shape[1] != dim:
            raise ValueError(f"vectors must be [N, {dim}], got {vectors.shape}")
        if labels.shape != (vectors.shape[0],):
            raise ValueError("labels must be one integer per vector")
        if dim < 1 or num_classes < 1:
            raise ValueError("dim and num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise LabelRangeError(
                f"labels must lie in [0, {num_classes}), got range "
                f"[{labels.min()}, {labels.max()}]"
            )
        if vectors.size and not np.isfinite(vectors).all():
            raise ValueError("vectors contain non-finite entries")
        vectors.setflags(write=False)
        labels.setflags(write=False)
        self.dim = int(dim)
        self.num_classes = int(num_classes)
        self.domain_id = str(domain_id)
        self.vectors = vectors
        self._labels = labels
        self.label_reads = 0

    @property
    def labels(self) -> np.ndarray:
        self.label_reads += 1
        return self._labels

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureDataset):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.num_classes == other.num_classes
            and self.domain_id == other.domain_id
            and self.vectors.tobytes() == other.vectors.tobytes()
            and np.array_equal(self._labels, other._labels)
        )

    def __repr__(self) -> str:
        return (
            f"FeatureDataset(domain_id={self.domain_id!r}, n={len(self)}, "
            f"dim={self.dim}, num_classes={self.num_classes})"
        )

    def class_counts(self) -> np.ndarray:
        """Per-class record counts. Counts as a label read."""
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices, domain_id=None) -> "FeatureDataset":
        """New dataset from row indices (dataset plumbing, not a label read)."""
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureDataset(
            self.dim,
            self.num_classes,
            self.domain_id if domain_id is None else domain_id,
            self.vectors[idx],
            self._labels[idx],
        )


@dataclass(frozen=True)
class DomainTransform:
    """Orthogonal map plus translation; shifts p(x) without touching p(y|x)."""

    matrix: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.matrix, dtype=np.float64)
        t = np.asarray(self.offset, dtype=np.float64)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValueError("transform matrix must be square")
        if t.shape != (q.shape[0],):
            raise ValueError("offset dimension must match matrix")
        if not np.allclose(q @ q.T, np.eye(q.shape[0]), atol=1e-8):
            raise ValueError("transform matrix must be orthogonal within 1e-8")
        object.__setattr__(self, "matrix", q)
        object.__setattr__(self, "offset", t)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.matrix.T + self.offset


def identity_transform(dim: int) -> DomainTransform:
    return DomainTransform(np.eye(dim), np.zeros(dim))


def rotation_transform(dim, degrees, seed, offset_scale=0.0) -> DomainTransform:
    """Global rotation by `degrees` in floor(dim/2) random disjoint planes.

    Every vector turns by the same angle, so the induced domain gap scales
    with sin(degrees/2) instead of vanishing as 1/sqrt(dim) the way a single
    Givens plane would. Optional random translation of norm `offset_scale`.
    """
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    theta = np.deg2rad(degrees)
    block = np.eye(dim)
    for i in range(0, dim - 1, 2):
        c, s = np.cos(theta), np.sin(theta)
        block[i, i] = c
        block[i, i + 1] = -s
        block[i + 1, i] = s
        block[i + 1, i + 1] = c
    matrix = basis @ block @ basis.T
    offset = np.zeros(dim)
    if offset_scale > 0:
        direction = rng.standard_normal(dim)
        offset = offset_scale * direction / np.linalg.norm(direction)
    return DomainTransform(matrix, offset)


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic embedding domain.

    Class means are unit vectors; generation scales them by `separability`,
    so the effective means sit on a hypersphere of that radius. Gaussian
    within-class noise has isotropic scale `within_class_scale`. The domain
    transform is applied last.
    """

    dim: int
    num_classes: int
    class_means: np.ndarray
    within_class_scale: float
    domain_transform: DomainTransform
    separability: float
    seed: int

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=np.float64)
        if means.shape != (self.num_classes, self.dim):
            raise ValueError("class_means must be [num_classes, dim]")
        if self.within_class_scale < 0:
            raise ValueError("within_class_scale must be >= 0")
        if self.separability <= 0:
            raise ValueError("separability must be positive")
        if self.domain_transform.dim != self.dim:
            raise ValueError("domain_transform dim mismatch")
        object.__setattr__(self, "class_means", means)

    @staticmethod
    def make(dim, num_classes, separability, noise, mean_seed, draw_seed,
             transform=None) -> "SynthSpec":
        """Spec with unit-sphere class means drawn from `mean_seed`.

        Two specs built with the same `mean_seed` but different `draw_seed`
        describe fresh samples of the same domain; add a transform for a
        shifted domain with identical conditional geometry.
        """
        rng = np.random.default_rng(mean_seed)
        raw = rng.standard_normal((num_classes, dim))
        means = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        return SynthSpec(
            dim=dim,
            num_classes=num_classes,
            class_means=means,
            within_class_scale=noise,
            domain_transform=transform or identity_transform(dim),
            separability=separability,
            seed=draw_seed,
        )


def generate_synthetic(spec: SynthSpec, count_per_class, domain_id="synth") -> FeatureDataset:
    """Draw count_per_class[c] records per class: sep * mean_c + sigma * N(0, I),
    then the domain transform. Deterministic for a fixed spec."""
    counts = np.asarray(count_per_class, dtype=np.int64)
    if counts.shape != (spec.num_classes,):
        raise ValueError("count_per_class must have one entry per class")
    if (counts < 0).any():
        raise ValueError("counts must be nonnegative")
    if counts.sum() == 0:
        raise EmptyDatasetError("zero total count")
    rng = np.random.default_rng(spec.seed)
    chunks = []
    labels = []
    for c in range(spec.num_classes):
        n = int(counts[c])
        center = spec.separability * spec.class_means[c]
        noise = rng.standard_normal((n, spec.dim))
        chunks.append(center + spec.within_class_scale * noise)
        labels.append(np.full(n, c, dtype=np.int64))
    points = spec.domain_transform.apply(np.concatenate(chunks, axis=0))
    return FeatureDataset(
        spec.dim,
        spec.num_classes,
        domain_id,
        points.astype(np.float32),
        np.concatenate(labels),
    )


def write_fedf(ds: FeatureDataset, path) -> None:
    """Serialize to the FEDF binary format (little-endian, bit-exact)."""
    domain_bytes = ds.domain_id.encode("utf-8")
    if len(domain_bytes) > 0xFFFF:
        raise ValueError("domain_id too long for the format")
    record_dtype = np.dtype([("label", "<u4"), ("vector", "<f4", (ds.dim,))])
    records = np.empty(len(ds), dtype=record_dtype)
    records["label"] = ds._labels.astype(np.uint32)
    records["vector"] = ds.vectors
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEDF_MAGIC, FEDF_VERSION, ds.dim, ds.num_classes))
        f.write(_DOMAIN_LEN.pack(len(domain_bytes)))
        f.write(domain_bytes)
        f.write(_COUNT.pack(len(ds)))
        f.write(records.tobytes())


def read_fedf(path) -> FeatureDataset:
    """Parse a FEDF file; raises a distinct FedfError subclass per defect."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise TruncatedFileError("file shorter than the fixed header")
    magic, version, dim, num_classes = _HEADER.unpack_from(data, 0)
    if magic != FEDF_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != FEDF_VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    off = _HEADER.size
    if len(data) < off + _DOMAIN_LEN.size:
        raise TruncatedFileError("missing domain id length")
    (domain_len,) = _DOMAIN_LEN.unpack_from(data, off)
    off += _DOMAIN_LEN.size
    if len(data) < off + domain_len + _COUNT.size:
        raise TruncatedFileError("truncated domain id or record count")
    domain_id = data[off:off + domain_len].decode("utf-8")
    off += domain_len
    (record_count,) = _COUNT.unpack_from(data, off)
    off += _COUNT.size
    record_dtype = np.dtype([("label", "<u4"), ("vector", "<f4", (dim,))])
    expected = record_count * record_dtype.itemsize
    if len(data) - off != expected:
        raise TruncatedFileError(
            f"record section holds {len(data) - off} bytes, header promises {expected}"
        )
    records = np.frombuffer(data, dtype=record_dtype, count=record_count, offset=off)
    labels = records["label"].astype(np.int64)
    if record_count and labels.max() >= num_classes:
        raise LabelRangeError(
            f"label {labels.max()} out of range for {num_classes} classes"
        )
    vectors = np.ascontiguousarray(records["vector"]).reshape(record_count, dim)
    return FeatureDataset(dim, num_classes, domain_id, vectors, labels)
