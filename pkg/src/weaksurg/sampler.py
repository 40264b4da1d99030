"""Temporal pair selection and uncertainty-guided local crops."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass
class FramePair:
    clip_id: str
    ref_index: int
    target_index: int
    ref_frame: np.ndarray
    target_frame: np.ndarray
    ref_presence: np.ndarray
    target_presence: np.ndarray

    @property
    def gap(self) -> int:
        return self.target_index - self.ref_index


@dataclass
class LocalCropSet:
    crops: np.ndarray  # (L, crop, crop, 3) uint8
    boxes: np.ndarray  # (L, 4) as x0, y0, x1, y1 (exclusive)
    pseudo_presence: np.ndarray  # (L, C) uint8

    def __len__(self):
        return len(self.crops)


def sample_gap(num_frames: int, target: int, max_gap: int, rng: np.random.Generator) -> int:
    """Reference index for ``target``: uniform |gap| in [1, max_gap], random sign.

    If the chosen direction leaves the clip the sign flips, and only then is
    the reference clamped to the clip.
    """
    if num_frames < 2:
        raise ConfigurationError("a frame pair needs a clip with at least two frames")
    if max_gap < 1:
        raise ConfigurationError("max_gap must be at least 1")
    mag = int(rng.integers(1, min(max_gap, num_frames - 1) + 1))
    sign = 1 if rng.random() < 0.5 else -1
    ref = target + sign * mag
    if not 0 <= ref < num_frames:
        ref = target - sign * mag
    ref = min(max(ref, 0), num_frames - 1)
    if ref == target:  # only reachable through clamping
        ref = target + 1 if target + 1 < num_frames else target - 1
    return ref


def sample_pair(clip, max_gap: int, rng: np.random.Generator, target: int | None = None) -> FramePair:
    n = len(clip)
    if n < 2:
        raise ConfigurationError(f"clip {clip.clip_id} has {n} frame(s); pairs need two")
    if target is None:
        target = int(rng.integers(n))
    ref = sample_gap(n, target, max_gap, rng)
    return FramePair(
        clip_id=clip.clip_id,
        ref_index=ref,
        target_index=target,
        ref_frame=clip.frames[ref],
        target_frame=clip.frames[target],
        ref_presence=clip.presence[ref],
        target_presence=clip.presence[target],
    )


def uncertain_mask(cam: np.ndarray, low: float = 0.35, high: float = 0.55) -> np.ndarray:
    """Pixels whose strongest class activation falls in ``[low, high]``.

    ``cam`` is ``(C, H, W)``. An empty result falls back to the whole frame.
    """
    peak = cam.max(axis=0) if len(cam) else np.zeros(cam.shape[1:])
    mask = (peak >= low) & (peak <= high)
    if not mask.any():
        logger.debug("no uncertain pixels; falling back to the full frame")
        return np.ones_like(mask)
    return mask


def sample_local_crops(
    frame: np.ndarray,
    uncertain: np.ndarray,
    cam: np.ndarray,
    presence: np.ndarray,
    num_crops: int,
    crop_size: int,
    rng: np.random.Generator,
    cam_threshold: float = 0.5,
    min_fraction: float = 0.05,
) -> LocalCropSet:
    """Draw ``num_crops`` square crops centred on uncertain pixels.

    Crop ``l`` is labelled with class ``c`` when at least ``min_fraction`` of
    its pixels have ``cam[c] >= cam_threshold`` and ``c`` is present in the
    frame's image-level labels.
    """
    h, w = frame.shape[:2]
    if crop_size > min(h, w):
        raise ConfigurationError(f"crop size {crop_size} exceeds frame {h}x{w}")
    ys, xs = np.nonzero(uncertain)
    picks = rng.integers(len(ys), size=num_crops)
    half = crop_size // 2
    boxes = np.empty((num_crops, 4), dtype=np.int64)
    crops = np.empty((num_crops, crop_size, crop_size, frame.shape[2]), dtype=frame.dtype)
    labels = np.zeros((num_crops, cam.shape[0]), dtype=np.uint8)
    gate = np.asarray(presence).astype(bool)
    for i, p in enumerate(picks):
        x0 = int(np.clip(xs[p] - half, 0, w - crop_size))
        y0 = int(np.clip(ys[p] - half, 0, h - crop_size))
        boxes[i] = (x0, y0, x0 + crop_size, y0 + crop_size)
        crops[i] = frame[y0 : y0 + crop_size, x0 : x0 + crop_size]
        region = cam[:, y0 : y0 + crop_size, x0 : x0 + crop_size]
        frac = (region >= cam_threshold).mean(axis=(1, 2))
        labels[i] = (frac >= min_fraction) & gate
    return LocalCropSet(crops, boxes, labels)
