"""Static per-frame panels: frame, CAM overlay per present class, seed, instances."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pseudomask import cam_to_seed, seed_to_instances  # noqa: E402


def _instance_rgb(instances, shape, num_classes):
    cmap = plt.get_cmap("tab10")
    out = np.zeros((*shape, 3))
    for inst in sorted(instances, key=lambda i: i.score):
        out[inst.mask] = cmap(inst.class_id % 10)[:3]
    return out


def frame_panel(frame, cam, presence, class_names, theta_bg=0.3, min_area_frac=0.001):
    """Build one matplotlib figure for a single frame; the caller closes it."""
    present = [c for c in range(cam.shape[0]) if presence[c]]
    seed = cam_to_seed(cam, presence, theta_bg)
    instances = seed_to_instances(seed, cam, min_area_frac)
    cols = 3 + len(present)
    fig, axes = plt.subplots(1, cols, figsize=(2.2 * cols, 2.4))
    axes[0].imshow(frame)
    axes[0].set_title("frame", fontsize=8)
    for ax, c in zip(axes[1:], present):
        ax.imshow(frame)
        ax.imshow(cam[c], cmap="jet", alpha=0.5, vmin=0.0, vmax=1.0)
        ax.set_title(f"CAM {class_names[c]}", fontsize=8)
    axes[-2].imshow(seed, cmap="tab10", vmin=0, vmax=9, interpolation="nearest")
    axes[-2].set_title("seed", fontsize=8)
    axes[-1].imshow(_instance_rgb(instances, seed.shape, cam.shape[0]), interpolation="nearest")
    axes[-1].set_title(f"instances ({len(instances)})", fontsize=8)
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    return fig


def export_plots(cam_source, clips, out_dir, class_names=None, theta_bg=0.3, min_area_frac=0.001):
    """Write ``<clip_id>/<frame>.png`` for every frame; return the written paths."""
    out_dir = Path(out_dir)
    written = []
    for clip in clips:
        names = class_names or [f"class_{i}" for i in range(clip.num_classes)]
        cams = cam_source(clip)
        cdir = out_dir / clip.clip_id
        cdir.mkdir(parents=True, exist_ok=True)
        for f in range(len(clip)):
            fig = frame_panel(clip.frames[f], cams[f], clip.presence[f], names, theta_bg, min_area_frac)
            path = cdir / f"{f:06d}.png"
            fig.savefig(path, dpi=80)
            plt.close(fig)
            written.append(path)
    return written
