"""CAM seeds and connectivity-based instance pseudo masks."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .structures import Instance

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def cam_to_seed(cam: np.ndarray, presence, bg_threshold: float = 0.3) -> np.ndarray:
    """Label map from a ``(C, H, W)`` CAM; classes absent from ``presence`` are
    zeroed first. ``np.argmax`` breaks ties toward the lowest class id."""
    gated = cam * np.asarray(presence, dtype=cam.dtype)[:, None, None]
    peak = gated.max(axis=0)
    seed = gated.argmax(axis=0) + 1
    seed[peak < bg_threshold] = 0
    return seed.astype(np.int64)


def seed_to_instances(seed: np.ndarray, cam: np.ndarray, min_area_frac: float = 0.001) -> list[Instance]:
    """Split each class of ``seed`` into 8-connected components.

    Components smaller than ``min_area_frac`` of the image are dropped. The
    score of an instance is the mean activation of its class over its pixels.
    """
    min_area = min_area_frac * seed.size
    instances = []
    for label in np.unique(seed):
        if label == 0:
            continue
        comps, n = ndimage.label(seed == label, structure=EIGHT_CONNECTED)
        for k in range(1, n + 1):
            mask = comps == k
            if mask.sum() < min_area:
                continue
            score = float(cam[label - 1][mask].mean())
            instances.append(Instance(int(label - 1), min(max(score, 0.0), 1.0), mask))
    return instances


class RefinerUnavailable(RuntimeError):
    """Raised by a refiner whose backend cannot be loaded."""


class IdentityRefiner:
    def __call__(self, instances, frame):
        return list(instances)


def refine(instances, frame, refiner=None):
    """Apply ``refiner(instances, frame)``; fall back to the identity if its
    backend is unavailable."""
    if refiner is None:
        return list(instances)
    try:
        return refiner(instances, frame)
    except RefinerUnavailable as exc:
        logger.warning("refiner unavailable (%s); keeping raw masks", exc)
        return list(instances)


def write_pseudo_masks(frames_instances, out_dir, shape) -> None:
    """Write per-frame instance-id PNGs plus ``scores.json``.

    ``scores.json`` maps frame file name to ``{instance id: [class, score]}``.
    """
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    sidecar = {}
    for f, instances in enumerate(frames_instances):
        name = f"{f:06d}.png"
        id_map = np.zeros(shape, dtype=np.uint16)
        entry = {}
        for k, inst in enumerate(instances, start=1):
            id_map[inst.mask] = k
            entry[str(k)] = [inst.class_id, inst.score]
        Image.fromarray(id_map).save(out / "masks" / name)
        sidecar[name] = entry
    (out / "scores.json").write_text(json.dumps(sidecar, indent=1))
