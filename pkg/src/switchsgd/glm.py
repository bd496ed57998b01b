"""Quantized GLM numerics.

Features are 8-bit unsigned fractions stored bit-plane-major ("woven") so
that a precision-s pass reads only the s most significant planes. Weights
and all running sums are Q16.16 with wrapping (mod 2^32) arithmetic.

The bit-serial product of feature and weight is defined per element:

    contrib(j) = sum over planes p < s with bit set of (weight_j >> (p+1))

and a dot product is the wrapping sum of per-element contributions. Since
every operation is a wrapping add of per-(element, plane) terms, any
regrouping of the sum - across feature partitions, engines, workers, or
micro-batches - yields the exact same 32-bit result. That regrouping
freedom is what makes distributed training bit-identical to the
sequential reference.
"""

from __future__ import annotations

import math

import numpy as np

from .wire import FX_ONE, fx_from_real, fx_mul, wrap32

LOSS_KINDS = ("squared", "logistic")


def _check_precision(s: int) -> None:
    if not 1 <= s <= 8:
        raise ValueError(f"precision must be in [1, 8], got {s}")


class WovenMatrix:
    """Bit-plane storage of a quantized S x D feature matrix.

    `raws` is the padded uint8 matrix (D padded up to a multiple of 64
    with zero features). `plane_words()` materializes the packed layout:
    per sample, per 64-feature chunk, 8 words of 64 bits where word p
    holds the p-th most significant bit of each feature.
    """

    def __init__(self, raws: np.ndarray):
        if raws.dtype != np.uint8 or raws.ndim != 2:
            raise ValueError("woven matrix needs a 2-d uint8 array")
        if raws.shape[1] % 64:
            raise ValueError("feature count must be padded to a multiple of 64")
        self.raws = raws
        self._bits: np.ndarray | None = None
        self._floats: np.ndarray | None = None

    @property
    def n_samples(self) -> int:
        return self.raws.shape[0]

    @property
    def n_features(self) -> int:
        return self.raws.shape[1]

    @property
    def bits(self) -> np.ndarray:
        """(8, S, D) uint8 of 0/1; plane p is the p-th most significant bit."""
        if self._bits is None:
            shifts = np.arange(7, -1, -1, dtype=np.uint8).reshape(8, 1, 1)
            self._bits = (self.raws[None, :, :] >> shifts) & 1
        return self._bits

    @property
    def floats(self) -> np.ndarray:
        """Dequantized feature values in [0, 1), float64. For loss reporting only."""
        if self._floats is None:
            self._floats = self.raws.astype(np.float64) / 256.0
        return self._floats

    def plane_words(self) -> np.ndarray:
        """(S, D/64, 8) uint64 packed planes; bit j of word p == plane p of feature 64c+j."""
        s, d = self.raws.shape
        chunks = d // 64
        out = np.empty((s, chunks, 8), dtype=np.uint64)
        weights = np.uint64(1) << np.arange(64, dtype=np.uint64)
        for p in range(8):
            b = self.bits[p].reshape(s, chunks, 64).astype(np.uint64)
            out[:, :, p] = (b * weights).sum(axis=2)
        return out


def weave(features: np.ndarray) -> WovenMatrix:
    """Pad a uint8 feature matrix to a 64-feature boundary and weave it."""
    features = np.ascontiguousarray(features, dtype=np.uint8)
    if features.ndim != 2:
        raise ValueError("features must be 2-d")
    d = features.shape[1]
    pad = (-d) % 64
    if pad:
        features = np.hstack(
            [features, np.zeros((features.shape[0], pad), dtype=np.uint8)]
        )
    return WovenMatrix(features)


def unweave(woven: WovenMatrix) -> np.ndarray:
    """Reconstruct the raw uint8 matrix from the packed plane words."""
    words = woven.plane_words()
    s, chunks, _ = words.shape
    raws = np.zeros((s, chunks * 64), dtype=np.uint8)
    for p in range(8):
        w = words[:, :, p]
        for j in range(64):
            bit = ((w >> np.uint64(j)) & np.uint64(1)).astype(np.uint8)
            raws[:, np.arange(chunks) * 64 + j] |= bit << (7 - p)
    return raws


# --- bit-serial products --------------------------------------------------


def forward_batch(
    woven: WovenMatrix,
    row0: int,
    nrows: int,
    start: int,
    weights: np.ndarray,
    precision: int,
) -> np.ndarray:
    """Dot products of rows [row0, row0+nrows) against `weights`.

    `weights` covers features [start, start+len(weights)); returns int32
    raw activations, one per row, accumulated with wrapping adds.
    """
    _check_precision(precision)
    w = np.asarray(weights, dtype=np.int32)
    bits = woven.bits
    acc = np.zeros(nrows, dtype=np.int32)
    stop = start + len(w)
    for p in range(precision):
        seg = bits[p, row0 : row0 + nrows, start:stop]
        acc += (seg * (w >> (p + 1))).sum(axis=1, dtype=np.int32)
    return acc


def bit_serial_dot(
    woven: WovenMatrix, sample: int, weights: np.ndarray, precision: int, start: int = 0
) -> int:
    """Single-sample dot product at the given bit precision (1..8)."""
    return int(forward_batch(woven, sample, 1, start, weights, precision)[0])


def backward_batch(
    woven: WovenMatrix,
    row0: int,
    nrows: int,
    start: int,
    width: int,
    scales: np.ndarray,
    precision: int,
) -> np.ndarray:
    """Gradient contribution sum_k trunc_s(feature_kj) * scale_k per feature j.

    Returns an int32 vector of length `width` for features
    [start, start+width); wrapping accumulation, same per-element
    bit-serial products as the forward pass.
    """
    _check_precision(precision)
    sc = np.asarray(scales, dtype=np.int32)
    bits = woven.bits
    g = np.zeros(width, dtype=np.int32)
    stop = start + width
    for p in range(precision):
        seg = bits[p, row0 : row0 + nrows, start:stop]
        g += (seg * (sc >> (p + 1))[:, None]).sum(axis=0, dtype=np.int32)
    return g


def backward_accumulate(
    grad: np.ndarray,
    woven: WovenMatrix,
    sample: int,
    scale: int,
    precision: int,
    start: int = 0,
) -> None:
    """grad_j += trunc_s(feature_j) * scale for one sample, in place."""
    grad += backward_batch(
        woven, sample, 1, start, len(grad), np.array([scale], np.int32), precision
    )


# --- loss derivative ------------------------------------------------------

SIGMOID_LO = -8 * FX_ONE
SIGMOID_HI = 8 * FX_ONE
_SIGMOID_CELL_BITS = 12  # cell width 2^12 raw = 1/16, 256 cells over [-8, 8)


def _build_sigmoid_knots() -> np.ndarray:
    knots = np.empty(257, dtype=np.int64)
    for i in range(257):
        a = -8.0 + i / 16.0
        knots[i] = fx_from_real(1.0 / (1.0 + math.exp(-a)))
    knots[128] = FX_ONE // 2  # pin sigmoid(0) = 0.5 exactly
    return knots


_SIGMOID_KNOTS = _build_sigmoid_knots()


def sigmoid_lut(activation: int) -> int:
    """Piecewise-linear fixed-point sigmoid, 256 cells over [-8, 8).

    Clamps to 0.0 / 1.0 outside the table. Pure integer interpolation,
    so every worker computes the identical value.
    """
    if activation < SIGMOID_LO:
        return 0
    if activation >= SIGMOID_HI:
        return FX_ONE
    off = activation - SIGMOID_LO
    i = off >> _SIGMOID_CELL_BITS
    t = off & ((1 << _SIGMOID_CELL_BITS) - 1)
    y0 = int(_SIGMOID_KNOTS[i])
    y1 = int(_SIGMOID_KNOTS[i + 1])
    return y0 + (((y1 - y0) * t) >> _SIGMOID_CELL_BITS)


def df(kind: str, activation: int, label: int) -> int:
    """Loss derivative in Q16.16: squared -> a - b; logistic -> sigma(a) - b."""
    if kind == "squared":
        return wrap32(activation - label)
    if kind == "logistic":
        return wrap32(sigmoid_lut(activation) - label)
    raise ValueError(f"unknown loss kind {kind!r}")


# --- update and reference loop --------------------------------------------


def _shift_for_minibatch(minibatch: int) -> int:
    if minibatch < 1 or minibatch & (minibatch - 1):
        raise ValueError(f"mini-batch size must be a power of two, got {minibatch}")
    return minibatch.bit_length() - 1


def model_update(x: np.ndarray, g: np.ndarray, minibatch: int) -> None:
    """x_j -= g_j >> log2(minibatch), wrapping, in place."""
    shift = _shift_for_minibatch(minibatch)
    if len(g) != len(x):
        raise ValueError("gradient/model length mismatch")
    x -= np.asarray(g, np.int32) >> shift


def batch_scales(
    kind: str, gamma: int, acts: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """scale_k = gamma * df(act_k, label_k) in Q16.16, elementwise."""
    out = np.empty(len(acts), dtype=np.int32)
    for k in range(len(acts)):
        out[k] = fx_mul(gamma, df(kind, int(acts[k]), int(labels[k])))
    return out


def loss_eval(
    weights: np.ndarray, woven: WovenMatrix, labels: np.ndarray, kind: str
) -> float:
    """Mean training loss in float64. Reporting only: never feeds back into state."""
    a = woven.floats @ (np.asarray(weights, np.int64) / FX_ONE)
    b = np.asarray(labels, np.int64) / FX_ONE
    if kind == "squared":
        return float(0.5 * np.mean((a - b) ** 2))
    if kind == "logistic":
        z = np.clip(a, -30.0, 30.0)
        p = 1.0 / (1.0 + np.exp(-z))
        eps = 1e-12
        return float(-np.mean(b * np.log(p + eps) + (1.0 - b) * np.log(1.0 - p + eps)))
    raise ValueError(f"unknown loss kind {kind!r}")


def reference_sgd(
    woven: WovenMatrix,
    labels: np.ndarray,
    *,
    minibatch: int,
    precision: int,
    learning_rate: float,
    epochs: int,
    loss_kind: str = "squared",
    compute_loss: bool = True,
):
    """Sequential mini-batch SGD at full feature width.

    Returns (model, losses) where losses[e] is the training loss after e
    epochs (losses[0] is the starting loss); losses is empty when
    compute_loss is false. A trailing partial batch still divides by the
    configured mini-batch size (shift by log2), a deliberate bias shared
    with the distributed paths.
    """
    _check_precision(precision)
    _shift_for_minibatch(minibatch)
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    gamma = fx_from_real(learning_rate)
    n, d = woven.n_samples, woven.n_features
    x = np.zeros(d, dtype=np.int32)
    losses: list[float] = []
    if compute_loss:
        losses.append(loss_eval(x, woven, labels, loss_kind))
    for _ in range(epochs):
        for row0 in range(0, n, minibatch):
            rows = min(minibatch, n - row0)
            acts = forward_batch(woven, row0, rows, 0, x, precision)
            scales = batch_scales(loss_kind, gamma, acts, labels[row0 : row0 + rows])
            g = backward_batch(woven, row0, rows, 0, d, scales, precision)
            model_update(x, g, minibatch)
        if compute_loss:
            losses.append(loss_eval(x, woven, labels, loss_kind))
    return x, losses
