"""Procedural frame corpora for smoke runs and overfit experiments."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .color_space import ycbcr_to_rgb

# Orange-ish chroma; luma must stay in [0.443, 0.719] for it to remain in gamut.
ORANGE_CHROMA = (0.25, 0.70)
_LUMA_LO, _LUMA_HI = 0.46, 0.70


def _soft(d: np.ndarray, width: float) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(d / width))


def talking_head_luma(n_frames: int, size: int, seed: int = 0) -> np.ndarray:
    """Luma planes of a face-like ellipse with a mouth that opens and closes.

    Returns an ``(n_frames, size, size)`` array in [0.46, 0.70].
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = rng.uniform(0, 2 * np.pi)
    cx, cy = rng.uniform(0.45, 0.55, size=2)
    frames = []
    for i in range(n_frames):
        s = np.sin(phase + 0.6 * i)
        background = 0.25 * (xx + yy)
        head = _soft(np.hypot((xx - cx) / 0.28, (yy - cy) / 0.36) - 1.0, 0.06)
        eyes = sum(
            _soft(np.hypot(xx - (cx + dx), yy - (cy - 0.1)) - 0.05, 0.015) for dx in (-0.1, 0.1)
        )
        mouth_h = 0.03 + 0.03 * (1 + s)
        mouth = _soft(np.hypot((xx - cx) / 0.12, (yy - (cy + 0.17)) / mouth_h) - 1.0, 0.08)
        plane = background + 0.6 * head - 0.5 * eyes * head - 0.45 * mouth * head
        frames.append(plane)
    frames = np.stack(frames)
    lo, hi = frames.min(), frames.max()
    return _LUMA_LO + (frames - lo) / max(hi - lo, 1e-12) * (_LUMA_HI - _LUMA_LO)


def constant_chroma_clip(
    n_frames: int,
    size: int,
    seed: int = 0,
    chroma: tuple[float, float] = ORANGE_CHROMA,
) -> np.ndarray:
    """RGB frames whose every pixel shares one (Cb, Cr) pair.

    Returns an ``(n_frames, size, size, 3)`` float64 array in [0, 1].
    """
    luma = talking_head_luma(n_frames, size, seed)
    ycc = np.empty(luma.shape + (3,))
    ycc[..., 0] = luma
    ycc[..., 1] = chroma[0]
    ycc[..., 2] = chroma[1]
    return np.clip(ycbcr_to_rgb(ycc), 0.0, 1.0)


def write_corpus(
    root: str | Path,
    n_subjects: int = 2,
    clips_per_subject: int = 1,
    n_frames: int = 4,
    size: int = 64,
    seed: int = 0,
) -> Path:
    """Write a ``root/<subject>/<clip>/<index>.png`` tree of synthetic clips."""
    from .dataset import save_png

    root = Path(root)
    rng = np.random.default_rng(seed)
    for s in range(n_subjects):
        cb, cr = 0.5 + rng.uniform(-0.12, 0.12, size=2)
        for c in range(clips_per_subject):
            frames = constant_chroma_clip(
                n_frames, size, seed=int(rng.integers(1 << 31)), chroma=(cb, cr)
            )
            clip_dir = root / f"subject{s:02d}" / f"clip{c:02d}"
            clip_dir.mkdir(parents=True, exist_ok=True)
            for i, frame in enumerate(frames):
                save_png(frame, clip_dir / f"{i:04d}.png")
    return root
