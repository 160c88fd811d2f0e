"""Distribution distances and ranking metrics over image feature sets.

All math here is numpy float64 and free of hidden state.  The MMD-style
estimators accumulate kernel values with exact summation (math.fsum), so
results are invariant to the ordering of set elements bit-for-bit.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np


class MetricError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """A metric computation left its valid numerical regime."""


# --------------------------------------------------------------------------
# Feature extraction


@dataclass(frozen=True)
class FeatureSet:
    vectors: np.ndarray  # (n, d) float64
    extractor_id: str

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise MetricError(f"feature matrix must be 2-D, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise MetricError("feature matrix contains non-finite entries")
        object.__setattr__(self, "vectors", v)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class Extractor:
    id: str
    dim: int
    fn: Callable[[np.ndarray], np.ndarray]


_EXTRACTORS: dict[str, Extractor] = {}


def register_extractor(extractor: Extractor) -> None:
    _EXTRACTORS[extractor.id] = extractor


def get_extractor(extractor_id: str) -> Extractor:
    if extractor_id not in _EXTRACTORS:
        raise MetricError(
            f"unknown extractor {extractor_id!r}; registered: {sorted(_EXTRACTORS)}"
        )
    return _EXTRACTORS[extractor_id]


def _desk64(image: np.ndarray) -> np.ndarray:
    """48-bin color histogram (16/channel) + 16 orientation-binned gradient
    magnitude sums, L2-normalized to a unit 64-vector."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise MetricError(f"expected HxWx3 image, got shape {image.shape}")
    u8 = image.astype(np.uint8)
    n_px = u8.shape[0] * u8.shape[1]
    hist = np.concatenate(
        [np.bincount(u8[:, :, c].reshape(-1) >> 4, minlength=16) for c in range(3)]
    ).astype(np.float64) / n_px

    gray = u8.astype(np.float64).mean(axis=2) / 255.0
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)  # [-pi, pi]
    bins = np.clip(((ang + np.pi) / (2 * np.pi) * 16).astype(np.int64), 0, 15)
    orient = np.bincount(bins.reshape(-1), weights=mag.reshape(-1), minlength=16) / n_px

    feat = np.concatenate([hist, orient])
    return feat / np.linalg.norm(feat)


register_extractor(Extractor(id="desk64", dim=64, fn=_desk64))


def extract_features(images, extractor_id: str = "desk64") -> FeatureSet:
    """Deterministic per-image feature vectors; images are HxWx3 uint8 arrays."""
    ext = get_extractor(extractor_id)
    vectors = np.stack([ext.fn(np.asarray(img)) for img in images])
    if vectors.shape[1] != ext.dim:
        raise MetricError(f"extractor {ext.id} produced dim {vectors.shape[1]} != {ext.dim}")
    return FeatureSet(vectors=vectors, extractor_id=ext.id)


# --------------------------------------------------------------------------
# Gaussian fitting and the Frechet distance


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray     # (d,)
    sigma: np.ndarray  # (d, d) symmetric PSD (clamped)


def fit_gaussian(features: FeatureSet) -> GaussianStats:
    """Sample mean and unbiased covariance, symmetrized as (S + S^T)/2."""
    x = features.vectors
    if x.shape[0] < 2:
        raise MetricError(f"need at least 2 feature vectors, got {x.shape[0]}")
    mu = x.mean(axis=0)
    xc = x - mu
    sigma = xc.T @ xc / (x.shape[0] - 1)
    sigma = (sigma + sigma.T) / 2.0
    return GaussianStats(mu=mu, sigma=sigma)


def _psd_eigvals(mat: np.ndarray, what: str) -> np.ndarray:
    w = np.linalg.eigvalsh(mat)
    wmax = float(w.max(initial=0.0))
    tol = 1e-10 * max(wmax, 0.0) + 1e-12
    if w.min(initial=0.0) < -tol:
        raise NumericalError(
            f"{what}: eigenvalue {w.min():.3e} below -{tol:.3e}; matrix strongly non-PSD"
        )
    return np.clip(w, 0.0, None)


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(mat)
    wmax = float(w.max(initial=0.0))
    tol = 1e-10 * max(wmax, 0.0) + 1e-12
    if w.min(initial=0.0) < -tol:
        raise NumericalError(f"covariance eigenvalue {w.min():.3e} strongly negative")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(g1: GaussianStats, g2: GaussianStats) -> float:
    """|mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), via the symmetric product
    sqrt(S1) S2 sqrt(S1) so the square root stays an eigendecomposition of a
    symmetric PSD matrix."""
    if g1.mu.shape != g2.mu.shape:
        raise MetricError("dimension mismatch between Gaussian stats")
    s1_half = _sqrt_psd(g1.sigma)
    inner = s1_half @ g2.sigma @ s1_half
    inner = (inner + inner.T) / 2.0
    cross = float(np.sqrt(_psd_eigvals(inner, "covariance product")).sum())
    val = (
        float(np.sum((g1.mu - g2.mu) ** 2))
        + float(np.trace(g1.sigma))
        + float(np.trace(g2.sigma))
        - 2.0 * cross
    )
    if not math.isfinite(val):
        raise NumericalError("frechet distance is non-finite")
    if val < -1e-8:
        raise NumericalError(f"frechet distance {val:.3e} significantly negative")
    return max(val, 0.0)


# --------------------------------------------------------------------------
# MMD estimators (KID / CMMD)


def _offdiag_mean(K: np.ndarray) -> float:
    m = K.shape[0]
    if m < 2:
        raise MetricError("unbiased MMD needs at least 2 samples per set")
    total = math.fsum(K.reshape(-1).tolist())
    diag = math.fsum(np.diagonal(K).tolist())
    return (total - diag) / (m * (m - 1))


def _full_mean(K: np.ndarray) -> float:
    return math.fsum(K.reshape(-1).tolist()) / K.size


def _mmd2_unbiased(kxx: np.ndarray, kyy: np.ndarray, kxy: np.ndarray) -> float:
    return _offdiag_mean(kxx) + _offdiag_mean(kyy) - 2.0 * _full_mean(kxy)


def _poly_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a.shape[1]
    return (a @ b.T / d + 1.0) ** 3


def kid(x: FeatureSet, y: FeatureSet, block_size: int | None = None) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel (x.y/d + 1)^3.

    May be negative (unbiased estimator).  block_size averages the estimator
    over disjoint blocks for very large sets; None uses all pairs.
    """
    if x.dim != y.dim:
        raise MetricError(f"feature dims differ: {x.dim} vs {y.dim}")
    if x.n < 2 or y.n < 2:
        raise MetricError("kid needs at least 2 vectors per set")
    if block_size is None:
        a, b = x.vectors, y.vectors
        return _mmd2_unbiased(_poly_kernel(a, a), _poly_kernel(b, b), _poly_kernel(a, b))
    n_blocks = max(min(x.n, y.n) // block_size, 1)
    vals = []
    for i in range(n_blocks):
        a = x.vectors[i * block_size: (i + 1) * block_size]
        b = y.vectors[i * block_size: (i + 1) * block_size]
        if len(a) >= 2 and len(b) >= 2:
            vals.append(_mmd2_unbiased(_poly_kernel(a, a), _poly_kernel(b, b), _poly_kernel(a, b)))
    return float(np.mean(vals))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(a**2, axis=1)[:, None]
        + np.sum(b**2, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    return np.clip(d2, 0.0, None)


def cmmd(x: FeatureSet, y: FeatureSet, sigma: float = 10.0, scale: float = 1000.0) -> float:
    """Unbiased Gaussian-RBF MMD^2 (bandwidth sigma) times a fixed scale."""
    if sigma <= 0:
        raise MetricError(f"bandwidth must be positive, got {sigma}")
    if x.dim != y.dim:
        raise MetricError(f"feature dims differ: {x.dim} vs {y.dim}")
    if x.n < 2 or y.n < 2:
        raise MetricError("cmmd needs at least 2 vectors per set")
    a, b = x.vectors, y.vectors
    g = 1.0 / (2.0 * sigma**2)
    kxx = np.exp(-g * _sq_dists(a, a))
    kyy = np.exp(-g * _sq_dists(b, b))
    kxy = np.exp(-g * _sq_dists(a, b))
    return scale * _mmd2_unbiased(kxx, kyy, kxy)


# --------------------------------------------------------------------------
# Pixel F1 and average precision


def pixel_f1(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2TP / (2TP + FP + FN) over binarized masks; two empty masks agree (1.0)."""
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise MetricError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")

    def _binarize(m: np.ndarray) -> np.ndarray:
        if m.dtype == bool:
            return m
        if np.issubdtype(m.dtype, np.floating):
            return m > 0.5
        return m > 127

    p = _binarize(pred_mask)
    g = _binarize(gt_mask)
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def average_precision(scores, labels) -> float:
    """Area under the precision-recall curve, precision monotonized from the
    right (all-points interpolation)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be matching 1-D sequences")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order].astype(np.float64)
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(scores) + 1, dtype=np.float64)
    precision = tp / ranks
    # monotonize from the right: p~[k] = max_{j >= k} p[j]
    p_interp = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(p_interp * hits) / n_pos)


@dataclass(frozen=True)
class MeanAP:
    value: float
    n_classes: int
    n_skipped: int

    def __float__(self) -> float:
        return self.value


def mean_ap(per_class: list[tuple[np.ndarray, np.ndarray]]) -> MeanAP:
    """Unweighted mean AP over classes that have positives; others are skipped
    and counted."""
    aps = []
    skipped = 0
    for scores, labels in per_class:
        if int(np.asarray(labels).sum()) == 0:
            skipped += 1
            continue
        aps.append(average_precision(scores, labels))
    if not aps:
        raise MetricError("no class has positive examples")
    return MeanAP(value=float(np.mean(aps)), n_classes=len(aps), n_skipped=skipped)


# --------------------------------------------------------------------------
# Feature cache: one file, JSON header line + raw float32 row-major payload


def save_features(path: str | Path, features: FeatureSet) -> None:
    header = json.dumps(
        {"n": features.n, "d": features.dim, "extractor_id": features.extractor_id,
         "dtype": "f32", "layout": "row-major"},
        sort_keys=True,
    ).encode("utf-8")
    payload = features.vectors.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_features(path: str | Path) -> FeatureSet:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if header["dtype"] != "f32":
        raise MetricError(f"unsupported feature dtype {header['dtype']!r}")
    vectors = data.reshape(header["n"], header["d"]).astype(np.float64)
    return FeatureSet(vectors=vectors, extractor_id=header["extractor_id"])
