"""Dataset loading, normalization, quantization, and partition planning.

Features end up as FeatureU8 (raw/256 in [0, 255/256]) via per-column
min-max scaling with round-half-up; a column's min always lands on raw 0
and its max on raw 255, so re-normalizing a quantized dataset is a
no-op. Labels become FixedQ16: squared-loss labels are clamped to the
representable range, logistic labels must be in {-1, 0, +1} and map to
{0, 1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .glm import WovenMatrix, weave
from .wire import FX_MAX, FX_MIN, FX_ONE, fx_from_real

CHUNK = 64  # feature-span alignment, one bit-plane word


class ParseError(ValueError):
    pass


class DataError(ValueError):
    pass


class PartitionError(ValueError):
    pass


@dataclass
class SparseDataset:
    """Row-sparse float features straight from a LIBSVM file."""

    labels: np.ndarray  # float64, shape (S,)
    rows: list  # per sample: (indices int64 0-based sorted, values float64)
    n_features: int

    @property
    def n_samples(self) -> int:
        return len(self.labels)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_samples, self.n_features), dtype=np.float64)
        for i, (idx, vals) in enumerate(self.rows):
            dense[i, idx] = vals
        return dense


def parse_libsvm(path) -> SparseDataset:
    """Parse "label idx:val ..." lines, 1-based indices, into a SparseDataset."""
    labels = []
    rows = []
    max_idx = 0
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            try:
                label = float(fields[0])
            except ValueError:
                raise ParseError(f"line {lineno}: non-numeric label {fields[0]!r}") from None
            idx = []
            vals = []
            for tok in fields[1:]:
                pair = tok.split(":")
                if len(pair) != 2:
                    raise ParseError(f"line {lineno}: malformed entry {tok!r}")
                try:
                    j = int(pair[0])
                    v = float(pair[1])
                except ValueError:
                    raise ParseError(f"line {lineno}: malformed entry {tok!r}") from None
                if j < 1:
                    raise ParseError(f"line {lineno}: index {j} is not 1-based")
                if idx and j <= idx[-1]:
                    raise ParseError(f"line {lineno}: indices not strictly increasing")
                idx.append(j)
                vals.append(v)
            labels.append(label)
            rows.append(
                (np.asarray(idx, dtype=np.int64) - 1, np.asarray(vals, dtype=np.float64))
            )
            if idx:
                max_idx = max(max_idx, idx[-1])
    if not labels:
        raise ParseError(f"{path}: no samples")
    return SparseDataset(np.asarray(labels, dtype=np.float64), rows, max_idx)


@dataclass
class Dataset:
    """Quantized dense dataset ready for bit-serial training."""

    labels: np.ndarray  # FixedQ16 raws, int32, shape (S,)
    features: np.ndarray  # FeatureU8 raws, uint8, shape (S, D)
    loss_kind: str
    _woven: WovenMatrix | None = field(default=None, repr=False)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def padded_features(self) -> int:
        return ((self.n_features + CHUNK - 1) // CHUNK) * CHUNK

    @property
    def woven(self) -> WovenMatrix:
        if self._woven is None:
            self._woven = weave(self.features)
        return self._woven


def quantize_dense(labels, features, loss_kind: str = "squared") -> Dataset:
    """Min-max scale each feature column and round to FeatureU8."""
    labels = np.asarray(labels, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(labels) != features.shape[0]:
        raise DataError("features must be S x D with one label per row")
    if not np.isfinite(features).all() or not np.isfinite(labels).all():
        raise DataError("non-finite value in input")
    lo = features.min(axis=0)
    span = features.max(axis=0) - lo
    dead = span == 0.0  # constant columns quantize to 0
    span = np.where(dead, 1.0, span)
    t = (features - lo) / span
    raw = np.floor(t * 255.0 + 0.5)
    raw[:, dead] = 0.0
    feats = raw.astype(np.uint8)

    if loss_kind == "logistic":
        bad = ~np.isin(labels, (-1.0, 0.0, 1.0))
        if bad.any():
            raise DataError(
                f"logistic labels must be -1/0/+1, found {labels[bad][0]}"
            )
        lab = np.where(labels > 0.0, FX_ONE, 0).astype(np.int32)
    elif loss_kind == "squared":
        # symmetric clamp: fx_from_real accepts magnitudes < 32768 only
        clamped = np.clip(labels, (FX_MIN + 1) / FX_ONE, FX_MAX / FX_ONE)
        lab = np.asarray([fx_from_real(v) for v in clamped], dtype=np.int32)
    else:
        raise DataError(f"unknown loss kind {loss_kind!r}")
    return Dataset(labels=lab, features=feats, loss_kind=loss_kind)


def normalize_quantize(sparse: SparseDataset, loss_kind: str = "squared") -> Dataset:
    return quantize_dense(sparse.labels, sparse.to_dense(), loss_kind)


@dataclass(frozen=True)
class PartitionPlan:
    """Contiguous spans assigning features (or samples) to owners."""

    mode: str  # "model" or "data"
    spans: tuple  # ((start, stop), ...) in owner order

    def __post_init__(self):
        stops = 0
        for start, stop in self.spans:
            if start != stops or stop <= start:
                raise PartitionError(f"spans not contiguous at {start}")
            stops = stop

    def owner_of(self, index: int) -> int:
        for i, (start, stop) in enumerate(self.spans):
            if start <= index < stop:
                return i
        raise IndexError(index)


def plan_partitions(
    n_features: int, n_samples: int, n_workers: int, n_engines: int, mode: str
) -> PartitionPlan:
    """Even contiguous split; remainders go to earlier partitions.

    Model mode cuts [0, n_features) into n_workers*n_engines chunk-aligned
    spans; data mode cuts [0, n_samples) into n_workers spans.
    """
    if mode == "model":
        parts = n_workers * n_engines
        if n_features % CHUNK:
            raise PartitionError(f"feature count {n_features} not a multiple of {CHUNK}")
        chunks = n_features // CHUNK
        if chunks < parts:
            raise PartitionError(
                f"{n_features} features cannot feed {parts} partitions of >= {CHUNK}"
            )
        base, rem = divmod(chunks, parts)
        sizes = [(base + (i < rem)) * CHUNK for i in range(parts)]
    elif mode == "data":
        if n_samples < n_workers:
            raise PartitionError(f"{n_samples} samples for {n_workers} partitions")
        base, rem = divmod(n_samples, n_workers)
        sizes = [base + (i < rem) for i in range(n_workers)]
    else:
        raise PartitionError(f"unknown mode {mode!r}")
    spans = []
    at = 0
    for size in sizes:
        spans.append((at, at + size))
        at += size
    return PartitionPlan(mode=mode, spans=tuple(spans))


def make_blobs(
    n_samples: int, n_features: int, margin: float = 0.5, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Two separable Gaussian blobs in [0,1)^D with labels {0,1}.

    The class centers sit margin apart along a random direction; noise is
    sized so the classes stay linearly separable after 8-bit quantization.
    """
    if not 0.0 < margin <= 1.0:
        raise DataError(f"margin must be in (0,1], got {margin}")
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(n_features)
    direction /= math.sqrt(float(direction @ direction))
    mid = np.full(n_features, 0.5)
    offset = direction * (margin / 2.0)
    sigma = margin / 16.0
    half = n_samples // 2
    sizes = (n_samples - half, half)
    feats = np.empty((n_samples, n_features), dtype=np.float64)
    labels = np.empty(n_samples, dtype=np.float64)
    at = 0
    for cls, size in enumerate(sizes):
        center = mid - offset if cls == 0 else mid + offset
        feats[at : at + size] = center + sigma * rng.standard_normal((size, n_features))
        labels[at : at + size] = float(cls)
        at += size
    # interleave classes so mini-batches see both
    order = rng.permutation(n_samples)
    np.clip(feats, 0.0, 1.0 - 2.0**-8, out=feats)
    return labels[order], feats[order]
