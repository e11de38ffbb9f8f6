"""Reference-based quality metrics and Fréchet distances.

FID and FVD are computed against pluggable embedders. The built-in
embedders are pooled color statistics, not pretrained networks, so their
distances are only comparable between runs that name the same embedder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .color_space import check_gray, check_rgb, chroma, rgb_to_gray, rgb_to_ycbcr
from .errors import NumericalError, ShapeError

PSNR_INF = math.inf
EIG_FLOOR = 1e-10


def psnr(a: np.ndarray, b: np.ndarray, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(max_value**2 / mse)


def _window_sums(x: np.ndarray, window: int) -> np.ndarray:
    # Sliding-window sums via a summed-area table, valid positions only.
    s = np.pad(x, ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    return s[window:, window:] - s[:-window, window:] - s[window:, :-window] + s[:-window, :-window]


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 8,
    data_range: float = 1.0,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity of two grayscale images.

    Local statistics use a ``window x window`` uniform window at every valid
    position (stride 1) with population variances.
    """
    a = check_gray(np.asarray(a, dtype=np.float64), "a")
    b = check_gray(np.asarray(b, dtype=np.float64), "b")
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"ssim needs two equal 2-D images, got {a.shape} and {b.shape}")
    if min(a.shape) < window:
        raise ShapeError(f"image {a.shape} is smaller than the {window}x{window} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    n = window * window
    mu_a = _window_sums(a, window) / n
    mu_b = _window_sums(b, window) / n
    var_a = np.maximum(_window_sums(a * a, window) / n - mu_a**2, 0.0)
    var_b = np.maximum(_window_sums(b * b, window) / n - mu_b**2, 0.0)
    cov = _window_sums(a * b, window) / n - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_rgb(a: np.ndarray, b: np.ndarray, **kwargs) -> float:
    """SSIM of two color images computed on their luma."""
    return ssim(rgb_to_gray(a), rgb_to_gray(b), **kwargs)


@dataclass
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = self.mean.size
        if self.covariance.shape != (d, d):
            raise ShapeError(f"covariance {self.covariance.shape} does not match mean of size {d}")
        if self.count < 2:
            raise ValueError(f"feature statistics need at least 2 samples, got {self.count}")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-9, rtol=0):
            raise ValueError("covariance is not symmetric")

    @property
    def dim(self) -> int:
        return self.mean.size


def feature_stats(features: np.ndarray) -> FeatureStats:
    """Mean and unbiased covariance of an ``(n, d)`` feature matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be (n, d), got {x.shape}")
    if x.shape[0] < 2:
        raise ValueError(f"feature statistics need at least 2 samples, got {x.shape[0]}")
    cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
    return FeatureStats(x.mean(axis=0), (cov + cov.T) / 2, x.shape[0])


class RunningStats:
    """Streaming accumulator producing the same result as :func:`feature_stats`."""

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0
        self._mean = np.zeros(dim)
        self._m2 = np.zeros((dim, dim))

    def update(self, features: np.ndarray) -> None:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ShapeError(f"expected features of width {self.dim}, got {x.shape[1]}")
        # Chan et al. pairwise merge of (count, mean, M2).
        n_b = x.shape[0]
        mean_b = x.mean(axis=0)
        centered = x - mean_b
        m2_b = centered.T @ centered
        n = self.count + n_b
        delta = mean_b - self._mean
        self._mean = self._mean + delta * (n_b / n)
        self._m2 = self._m2 + m2_b + np.outer(delta, delta) * (self.count * n_b / n)
        self.count = n

    def stats(self) -> FeatureStats:
        if self.count < 2:
            raise ValueError(f"feature statistics need at least 2 samples, got {self.count}")
        cov = self._m2 / (self.count - 1)
        return FeatureStats(self._mean.copy(), (cov + cov.T) / 2, self.count)


def _clamp_eig(w: np.ndarray) -> np.ndarray:
    return np.where(w < EIG_FLOOR, 0.0, w)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(_clamp_eig(w))) @ v.T


def frechet(p: FeatureStats, q: FeatureStats) -> float:
    """Squared Fréchet distance between two Gaussian fits.

    The trace of ``(Σp Σq)^{1/2}`` equals the sum of singular values of
    ``Σp^{1/2} Σq^{1/2}``, which avoids squaring small eigenvalues. Each
    covariance root is taken by eigendecomposition with eigenvalues below
    ``1e-10`` (round-off negatives included) set to zero.
    """
    if p.dim != q.dim:
        raise ShapeError(f"feature dimensions differ: {p.dim} vs {q.dim}")
    diff = p.mean - q.mean
    try:
        sv = np.linalg.svd(_psd_sqrt(p.covariance) @ _psd_sqrt(q.covariance), compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"matrix square root failed: cond(Σp)={np.linalg.cond(p.covariance):.3g}, "
            f"cond(Σq)={np.linalg.cond(q.covariance):.3g}"
        ) from exc
    if not np.all(np.isfinite(sv)):
        raise NumericalError(
            f"non-finite singular values: cond(Σp)={np.linalg.cond(p.covariance):.3g}, "
            f"cond(Σq)={np.linalg.cond(q.covariance):.3g}"
        )
    tr_root = float(np.sum(sv))
    dist = float(diff @ diff + np.trace(p.covariance) + np.trace(q.covariance) - 2.0 * tr_root)
    return max(dist, 0.0)


# ---------------------------------------------------------------- embedders


@dataclass(frozen=True)
class Embedder:
    """Deterministic map from an image (or clip) to a fixed-width vector."""

    id: str
    dim: int
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        v = np.asarray(self.fn(np.asarray(x, dtype=np.float64)), dtype=np.float64).reshape(-1)
        if v.size != self.dim:
            raise ShapeError(f"embedder {self.id} produced {v.size} values, expected {self.dim}")
        return v


def _ycc_mean(img: np.ndarray) -> np.ndarray:
    return rgb_to_ycbcr(check_rgb(img)).reshape(-1, 3).mean(axis=0)


def _ycc_stats(img: np.ndarray) -> np.ndarray:
    ycc = rgb_to_ycbcr(check_rgb(img)).reshape(-1, 3)
    return np.concatenate([ycc.mean(axis=0), ycc.std(axis=0)])


IMAGE_EMBEDDERS: dict[str, Embedder] = {
    "ycc-mean": Embedder("ycc-mean", 3, _ycc_mean),
    "ycc-stats": Embedder("ycc-stats", 6, _ycc_stats),
}


def clip_embedder(frame: Embedder) -> Embedder:
    """Lift a frame embedder to clips: time-mean and time-std of frame features."""

    def fn(clip: np.ndarray) -> np.ndarray:
        feats = np.stack([frame(f) for f in clip])
        return np.concatenate([feats.mean(axis=0), feats.std(axis=0)])

    return Embedder(f"clip[{frame.id}]", 2 * frame.dim, fn)


def get_embedder(embedder: str | Embedder) -> Embedder:
    if isinstance(embedder, Embedder):
        return embedder
    try:
        return IMAGE_EMBEDDERS[embedder]
    except KeyError:
        raise ValueError(
            f"unknown embedder {embedder!r}; available: {sorted(IMAGE_EMBEDDERS)}"
        ) from None


def fid(frames_a: Sequence[np.ndarray], frames_b: Sequence[np.ndarray], embedder: str | Embedder = "ycc-stats") -> float:
    """Fréchet distance between embedded frame sets."""
    e = get_embedder(embedder)
    if len(frames_a) < 2 or len(frames_b) < 2:
        raise ValueError("fid needs at least 2 frames per side")
    fa = feature_stats(np.stack([e(f) for f in frames_a]))
    fb = feature_stats(np.stack([e(f) for f in frames_b]))
    return frechet(fa, fb)


def fvd(clips_a: Sequence[np.ndarray], clips_b: Sequence[np.ndarray], embedder: str | Embedder = "ycc-stats") -> float:
    """Fréchet distance between embedded clip sets (each clip ``(T, H, W, 3)``)."""
    e = get_embedder(embedder)
    if not e.id.startswith("clip["):
        e = clip_embedder(e)
    if len(clips_a) < 2 or len(clips_b) < 2:
        raise ValueError("fvd needs at least 2 clips per side")
    fa = feature_stats(np.stack([e(c) for c in clips_a]))
    fb = feature_stats(np.stack([e(c) for c in clips_b]))
    return frechet(fa, fb)


def temporal_consistency_score(frames: Sequence[np.ndarray]) -> float:
    """Mean absolute (Cb, Cr) change between consecutive frames; lower is steadier."""
    if len(frames) < 2:
        raise ValueError("temporal consistency needs at least 2 frames")
    chromas = [chroma(np.asarray(f, dtype=np.float64)) for f in frames]
    return float(np.mean([np.mean(np.abs(b - a)) for a, b in zip(chromas, chromas[1:])]))
