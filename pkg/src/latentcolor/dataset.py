"""Frame-directory ingestion, subject-disjoint splits and training samples.

Corpora are laid out as ``root/<subject_id>/<clip>/<frame_index>.png``.
A clip is identified globally as ``"<subject_id>/<clip>"``.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .color_space import check_rgb, gray_to_rgb3, rgb_to_gray
from .errors import ConfigurationError, ManifestError

SPLITS = ("train", "test")


@dataclass(frozen=True, order=True)
class FrameRecord:
    clip_id: str
    frame_index: int
    subject_id: str = field(compare=False)
    path: str = field(compare=False)


@dataclass
class ClipManifest:
    """Frames of one or more clips sorted by ``(clip_id, frame_index)``.

    ``split`` is ``"train"``, ``"test"`` or ``None`` for an unsplit corpus.
    """

    records: list[FrameRecord]
    split: str | None = None

    def __post_init__(self) -> None:
        if self.split is not None and self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        self.records = list(self.records)
        if self.records != sorted(self.records):
            raise ManifestError("records are not sorted by (clip_id, frame_index)")
        validate_clips(self.records)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def subjects(self) -> set[str]:
        return {r.subject_id for r in self.records}

    @property
    def clip_ids(self) -> list[str]:
        return sorted({r.clip_id for r in self.records})

    def clip(self, clip_id: str) -> list[FrameRecord]:
        return [r for r in self.records if r.clip_id == clip_id]

    def to_json(self) -> str:
        doc = {"split": self.split, "records": [asdict(r) for r in self.records]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ClipManifest":
        try:
            doc = json.loads(text)
            records = [FrameRecord(**r) for r in doc["records"]]
            split = doc.get("split")
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestError(f"malformed manifest: {exc}") from exc
        return cls(records, split)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "ClipManifest":
        return cls.from_json(Path(path).read_text())


def validate_clips(records: Iterable[FrameRecord]) -> None:
    """Raise :class:`ManifestError` unless every clip is one contiguous run."""
    by_clip: dict[str, list[FrameRecord]] = {}
    for r in records:
        if r.frame_index < 0:
            raise ManifestError(f"clip {r.clip_id}: negative frame index {r.frame_index}")
        by_clip.setdefault(r.clip_id, []).append(r)
    for clip_id, recs in by_clip.items():
        indices = sorted(r.frame_index for r in recs)
        if len(set(indices)) != len(indices):
            raise ManifestError(f"clip {clip_id}: duplicate frame indices")
        if indices != list(range(indices[0], indices[0] + len(indices))):
            raise ManifestError(f"clip {clip_id}: frame indices are not contiguous: {indices}")
        if len({r.subject_id for r in recs}) != 1:
            raise ManifestError(f"clip {clip_id}: frames belong to several subjects")


def scan_frames(root: str | Path) -> ClipManifest:
    """Build a manifest from a ``root/<subject>/<clip>/<index>.png`` tree."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"frame directory not found: {root}")
    records = []
    for subject_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for clip_dir in sorted(p for p in subject_dir.iterdir() if p.is_dir()):
            for png in sorted(clip_dir.glob("*.png")):
                if not png.stem.isdigit():
                    raise ManifestError(f"frame file name is not an integer index: {png}")
                records.append(
                    FrameRecord(
                        clip_id=f"{subject_dir.name}/{clip_dir.name}",
                        frame_index=int(png.stem),
                        subject_id=subject_dir.name,
                        path=str(png),
                    )
                )
    return ClipManifest(sorted(records))


def split_by_subject(
    m: ClipManifest, test_fraction: float, seed: int
) -> tuple[ClipManifest, ClipManifest]:
    """Partition clips so that no subject appears on both sides.

    The test side receives ``ceil(test_fraction * n_subjects)`` subjects,
    drawn by a seeded shuffle of the sorted subject ids.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    subjects = sorted(m.subjects)
    if len(subjects) < 2:
        raise ManifestError("at least two subjects are needed for a subject-disjoint split")
    n_test = math.ceil(test_fraction * len(subjects))
    if n_test >= len(subjects):
        raise ManifestError(
            f"test_fraction {test_fraction} leaves no training subjects out of {len(subjects)}"
        )
    random.Random(seed).shuffle(subjects)
    test_subjects = set(subjects[:n_test])
    train = [r for r in m.records if r.subject_id not in test_subjects]
    test = [r for r in m.records if r.subject_id in test_subjects]
    return ClipManifest(train, "train"), ClipManifest(test, "test")


def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    """Decode an image file to float RGB in [0, 1], optionally resized square."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                # PIL widens the bilinear kernel when shrinking, i.e. antialiases.
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64)
    except (OSError, UnidentifiedImageError) as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def save_png(img: np.ndarray, path: str | Path) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        img = gray_to_rgb3(img)
    check_rgb(img)
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_gray(path: str | Path, size: int | None = None) -> np.ndarray:
    return rgb_to_gray(load_image(path, size))


@dataclass
class TrainingSample:
    current_color: np.ndarray
    current_gray: np.ndarray
    previous_color: np.ndarray
    is_first_frame: bool


def load_sample(m: ClipManifest, i: int, size: int = 128) -> TrainingSample:
    """Decode record ``i`` together with the preceding frame of its clip.

    The first frame of a clip serves as its own previous frame.
    """
    if not 0 <= i < len(m):
        raise IndexError(f"record index {i} outside manifest of {len(m)} frames")
    rec = m.records[i]
    color = load_image(rec.path, size)
    first = i == 0 or m.records[i - 1].clip_id != rec.clip_id
    previous = color if first else load_image(m.records[i - 1].path, size)
    return TrainingSample(color, rgb_to_gray(color), previous, first)


def samples_from_frames(frames: Sequence[np.ndarray]) -> list[TrainingSample]:
    """Training samples for an in-memory clip (first frame is its own predecessor)."""
    out = []
    for i, frame in enumerate(frames):
        frame = check_rgb(np.asarray(frame, dtype=np.float64))
        prev = frame if i == 0 else np.asarray(frames[i - 1], dtype=np.float64)
        out.append(TrainingSample(frame, rgb_to_gray(frame), prev, i == 0))
    return out


def to_chw(img: np.ndarray) -> torch.Tensor:
    """``(..., H, W, 3)`` numpy image to a float32 ``(..., 3, H, W)`` tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(img, -1, -3))).float()


def from_chw(t: torch.Tensor) -> np.ndarray:
    return np.moveaxis(t.detach().cpu().double().numpy(), -3, -1)


def sample_tensors(s: TrainingSample) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """``(color, gray replicated to 3 channels, previous color)`` as CHW tensors."""
    return to_chw(s.current_color), to_chw(gray_to_rgb3(s.current_gray)), to_chw(s.previous_color)


class FrameDataset(torch.utils.data.Dataset):
    """Torch dataset over a manifest or a list of in-memory samples."""

    def __init__(self, source: ClipManifest | Sequence[TrainingSample], size: int = 128, cache: bool = True):
        self.source = source
        self.size = size
        self.cache = cache
        self._cache: dict[int, tuple[torch.Tensor, ...]] = {}

    def __len__(self) -> int:
        return len(self.source)

    def __getitem__(self, i: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if i in self._cache:
            return self._cache[i]
        if isinstance(self.source, ClipManifest):
            sample = load_sample(self.source, i, self.size)
        else:
            sample = self.source[i]
        item = sample_tensors(sample)
        if self.cache:
            self._cache[i] = item
        return item
