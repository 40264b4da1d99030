"""Deterministic synthetic instrument videos and their on-disk layout.

Each clip shows two or three elongated "instruments" over a tissue-like
background. An instrument is a long, weakly tinted shaft that leaves the frame
plus a class-specific tip. The tip is the easy, discriminative cue; the shaft
is the hard one. Objects translate, rotate and drift in colour from frame to
frame.

Layout written by :func:`write_dataset`::

    root/meta.json
    root/clips/<clip_id>/frames/000000.png   8-bit RGB
    root/clips/<clip_id>/masks/000000.png    16-bit, pixel = instance id
    root/clips/<clip_id>/labels.json         per-frame presence vectors
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DatasetIOError
from .structures import Instance, idmap_to_instances

logger = logging.getLogger(__name__)

FORMAT_TAG = "weaksurg-dataset"
FORMAT_VERSION = 1
SHAPE_KINDS = ("instrument", "square", "capsule")
MIN_VISIBLE_FRACTION = 0.8


@dataclass(frozen=True)
class ObjectSpec:
    """One moving object.

    ``pose`` is ``(x, y, angle)``: the tip centre in pixels and the direction
    (radians) in which the shaft extends away from the tip. For squares the
    pose is the square centre. ``velocity`` uses the same units per frame.
    ``drift`` bounds the per-frame hue change as a fraction of the hue circle.
    """

    class_id: int
    shape_kind: str = "instrument"
    pose: tuple = (0.0, 0.0, 0.0)
    velocity: tuple = (0.0, 0.0, 0.0)
    drift: float = 0.0
    size: float = 10.0


@dataclass(frozen=True)
class ClipSpec:
    seed: int
    num_frames: int
    image_size: int = 128
    num_classes: int = 7
    objects: tuple = ()

    def validate(self):
        if self.num_frames <= 0:
            raise ConfigurationError(f"num_frames must be positive, got {self.num_frames}")
        if self.image_size <= 0:
            raise ConfigurationError(f"image_size must be positive, got {self.image_size}")
        if self.num_classes <= 0:
            raise ConfigurationError(f"num_classes must be positive, got {self.num_classes}")
        for obj in self.objects:
            if not 0 <= obj.class_id < self.num_classes:
                raise ConfigurationError(
                    f"class_id {obj.class_id} outside [0, {self.num_classes})"
                )
            if obj.shape_kind not in SHAPE_KINDS:
                raise ConfigurationError(f"unknown shape_kind {obj.shape_kind!r}")
            if obj.size <= 0:
                raise ConfigurationError("object size must be positive")


@dataclass
class Clip:
    clip_id: str
    frames: np.ndarray  # (F, H, W, 3) uint8
    presence: np.ndarray  # (F, C) uint8
    instance_maps: np.ndarray  # (F, H, W) uint16, 0 = background
    instance_classes: dict = field(default_factory=dict)  # instance id -> class id
    num_classes: int = 7

    def __post_init__(self):
        if not (len(self.frames) == len(self.presence) == len(self.instance_maps)):
            raise ConfigurationError("frames, presence and masks differ in length")

    def __len__(self):
        return len(self.frames)

    def __eq__(self, other):
        if not isinstance(other, Clip):
            return NotImplemented
        return (
            self.clip_id == other.clip_id
            and self.num_classes == other.num_classes
            and {int(k): int(v) for k, v in self.instance_classes.items()}
            == {int(k): int(v) for k, v in other.instance_classes.items()}
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.presence, other.presence)
            and np.array_equal(self.instance_maps, other.instance_maps)
        )

    @property
    def image_size(self) -> int:
        return int(self.frames.shape[1])

    @property
    def gt_instances(self) -> list:
        return [self.frame_instances(f) for f in range(len(self))]

    def head(self, n: int) -> "Clip":
        """The first ``n`` frames as a new clip."""
        return Clip(self.clip_id, self.frames[:n], self.presence[:n], self.instance_maps[:n],
                    dict(self.instance_classes), self.num_classes)

    def frame_instances(self, f: int) -> list[Instance]:
        return idmap_to_instances(self.instance_maps[f], self.instance_classes)

    def label_map(self, f: int) -> np.ndarray:
        """Dense ``class + 1`` map of frame ``f`` (0 = background)."""
        lut = np.zeros(int(self.instance_maps[f].max()) + 1, dtype=np.int64)
        for k, c in self.instance_classes.items():
            if int(k) < len(lut):
                lut[int(k)] = int(c) + 1
        return lut[self.instance_maps[f]]


# ----------------------------------------------------------------------------
# rasterisation (pixel centres, half-open edges)


def _grid(size):
    c = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(c, c)  # xs, ys


def _oriented_rect(xs, ys, cx, cy, angle, half_len, half_wid):
    ux, uy = math.cos(angle), math.sin(angle)
    dx, dy = xs - cx, ys - cy
    along = dx * ux + dy * uy
    across = -dx * uy + dy * ux
    return (along >= -half_len) & (along < half_len) & (across >= -half_wid) & (across < half_wid)


def _disc(xs, ys, cx, cy, r):
    return (xs - cx) ** 2 + (ys - cy) ** 2 < r * r


def _triangle(xs, ys, pts):
    (x0, y0), (x1, y1), (x2, y2) = pts
    d0 = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
    d1 = (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)
    d2 = (x0 - x2) * (ys - y2) - (y0 - y2) * (xs - x2)
    neg = (d0 < 0) | (d1 < 0) | (d2 < 0)
    pos = (d0 > 0) | (d1 > 0) | (d2 > 0)
    return ~(neg & pos)


def _segment(xs, ys, x0, y0, x1, y1, half_wid):
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    length = math.hypot(x1 - x0, y1 - y0)
    return _oriented_rect(xs, ys, cx, cy, math.atan2(y1 - y0, x1 - x0), length / 2, half_wid)


def _tip_mask(xs, ys, kind, x, y, angle, t):
    """Class-specific tip centred at (x, y); ``angle`` points into the shaft."""
    fx, fy = -math.cos(angle), -math.sin(angle)  # forward, away from the shaft
    px, py = -fy, fx  # perpendicular
    bx, by = x - fx * t / 2, y - fy * t / 2  # tip base (joins the shaft)
    hw = max(t * 0.12, 0.9)
    kind = kind % 7
    if kind == 0:  # grasper: two diverging jaws
        m = np.zeros_like(xs, dtype=bool)
        for s in (-1, 1):
            ex, ey = bx + fx * t + s * px * t * 0.45, by + fy * t + s * py * t * 0.45
            m |= _segment(xs, ys, bx, by, ex, ey, hw)
        return m
    if kind == 1:  # bipolar: two parallel prongs
        m = np.zeros_like(xs, dtype=bool)
        for s in (-1, 1):
            ox, oy = s * px * t * 0.25, s * py * t * 0.25
            m |= _segment(xs, ys, bx + ox, by + oy, bx + ox + fx * t, by + oy + fy * t, hw)
        return m | _segment(xs, ys, bx - px * t * 0.25, by - py * t * 0.25,
                            bx + px * t * 0.25, by + py * t * 0.25, hw)
    if kind == 2:  # hook: forward then sideways
        ex, ey = bx + fx * t * 0.8, by + fy * t * 0.8
        return _segment(xs, ys, bx, by, ex, ey, hw) | _segment(
            xs, ys, ex - px * hw, ey - py * hw, ex + px * t * 0.5, ey + py * t * 0.5, hw)
    if kind == 3:  # scissors: crossed blades
        m = np.zeros_like(xs, dtype=bool)
        for s in (-1, 1):
            m |= _segment(xs, ys, bx + s * px * t * 0.3, by + s * py * t * 0.3,
                          bx + fx * t - s * px * t * 0.3, by + fy * t - s * py * t * 0.3, hw)
        return m
    if kind == 4:  # clipper: wide block
        return _oriented_rect(xs, ys, x, y, angle, t / 2, t * 0.3)
    if kind == 5:  # irrigator: round head
        return _disc(xs, ys, x, y, t * 0.4)
    # specimen bag: broad triangle
    return _triangle(xs, ys, [
        (bx + px * t * 0.55, by + py * t * 0.55),
        (bx - px * t * 0.55, by - py * t * 0.55),
        (bx + fx * t, by + fy * t),
    ])


def object_geometry(obj: ObjectSpec, pose, size: int):
    """Return ``(tip_mask, body_mask)`` boolean maps for one object at ``pose``."""
    xs, ys = _grid(size)
    x, y, angle = pose
    if obj.shape_kind == "square":
        m = _oriented_rect(xs, ys, x, y, angle, obj.size / 2, obj.size / 2)
        return m, np.zeros_like(m)
    t = obj.size
    shaft_len = 0.75 * size
    hw = max(0.07 * size, 1.0)
    ux, uy = math.cos(angle), math.sin(angle)
    # the shaft starts at the tip centre so that every tip kind overlaps it
    half = (t / 2 + shaft_len) / 2
    shaft = _oriented_rect(xs, ys, x + ux * half, y + uy * half, angle, half, hw)
    if obj.shape_kind == "capsule":
        tip = _disc(xs, ys, x, y, t / 2)
    else:
        tip = _tip_mask(xs, ys, obj.class_id, x, y, angle, t)
    return tip, shaft & ~tip


# ----------------------------------------------------------------------------
# generation


def _trajectory(obj: ObjectSpec, num_frames: int, size: int):
    """Poses per frame; the tip reflects off a margin box and the angle oscillates."""
    x, y, a = (float(v) for v in obj.pose)
    vx, vy, va = (float(v) for v in obj.velocity)
    margin = obj.size * 0.6
    lo, hi = margin, size - margin
    a0, amp = a, 0.6
    poses = []
    for _ in range(num_frames):
        poses.append((x, y, a))
        x, y, a = x + vx, y + vy, a + va
        if lo < hi:
            if x < lo or x > hi:
                vx = -vx
                x = min(max(x, lo), hi)
            if y < lo or y > hi:
                vy = -vy
                y = min(max(y, lo), hi)
        if abs(a - a0) > amp:
            va = -va
            a = a0 + math.copysign(amp, a - a0)
    return poses


def _class_colors(class_id, num_classes):
    hue = (class_id / num_classes + 0.08) % 1.0
    return hue


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, min(max(s, 0), 1), min(max(v, 0), 1)))


def _background(rng, size, num_frames):
    """Smooth tissue-like texture that slowly pans over time."""
    xs, ys = _grid(size)
    n_waves = 6
    freqs = rng.uniform(0.5, 3.0, size=(n_waves, 2)) * (2 * math.pi / size)
    phases = rng.uniform(0, 2 * math.pi, size=n_waves)
    amps = rng.uniform(0.3, 1.0, size=n_waves)
    pan = rng.uniform(-0.4, 0.4, size=2)
    base_h = rng.uniform(0.95, 1.02)
    out = np.empty((num_frames, size, size, 3))
    for f in range(num_frames):
        px, py = pan * f
        field_ = sum(
            amps[k] * np.sin(freqs[k, 0] * (xs + px) + freqs[k, 1] * (ys + py) + phases[k])
            for k in range(n_waves)
        ) / amps.sum()
        v = 0.6 + 0.2 * field_
        s = 0.55 + 0.15 * field_
        rgb_hi = _hsv(base_h, 0.55, 0.8)
        rgb_lo = _hsv(base_h + 0.03, 0.75, 0.45)
        w = (field_ + 1) / 2
        out[f] = w[..., None] * rgb_hi + (1 - w[..., None]) * rgb_lo
        out[f] *= (v / 0.6)[..., None] * 0.9
        out[f] = np.clip(out[f] * (0.85 + 0.15 * s[..., None]), 0, 1)
    return out


def generate_clip(spec: ClipSpec, clip_id: str | None = None) -> Clip:
    """Render a clip; a pure function of ``spec``."""
    spec.validate()
    size, n = spec.image_size, spec.num_frames
    rng = np.random.default_rng(spec.seed)
    frames = _background(rng, size, n)
    id_maps = np.zeros((n, size, size), dtype=np.uint16)
    presence = np.zeros((n, spec.num_classes), dtype=np.uint8)
    instance_classes = {}

    for k, obj in enumerate(spec.objects):
        inst_id = k + 1
        instance_classes[inst_id] = obj.class_id
        hue0 = _class_colors(obj.class_id, spec.num_classes)
        hue_bound = 0.35 / spec.num_classes
        steps = rng.uniform(-obj.drift, obj.drift, size=n) if obj.drift > 0 else np.zeros(n)
        val_steps = rng.uniform(-obj.drift, obj.drift, size=n) if obj.drift > 0 else np.zeros(n)
        hue_off = np.clip(np.cumsum(steps) - steps[0], -hue_bound, hue_bound)
        val_off = np.clip(np.cumsum(val_steps) - val_steps[0], -0.12, 0.12)
        in_frame = 0
        for f, pose in enumerate(_trajectory(obj, n, size)):
            tip, body = object_geometry(obj, pose, size)
            if tip.any() or body.any():
                in_frame += 1
            h = hue0 + hue_off[f]
            tip_rgb = _hsv(h, 0.8, 0.9 + val_off[f])
            shaft_rgb = _hsv(h, 0.22, 0.62 + val_off[f])
            if obj.shape_kind == "square":
                shaft_rgb = tip_rgb
            frames[f][body] = shaft_rgb
            frames[f][tip] = tip_rgb
            id_maps[f][tip | body] = inst_id
        if n and in_frame < MIN_VISIBLE_FRACTION * n:
            raise ConfigurationError(
                f"object {k} (class {obj.class_id}) is in frame for only {in_frame}/{n} frames"
            )

    noise = rng.normal(0.0, 0.015, size=frames.shape)
    frames = np.clip(np.round((frames + noise) * 255), 0, 255).astype(np.uint8)
    for f in range(n):
        for inst_id in np.unique(id_maps[f]):
            if inst_id:
                presence[f, instance_classes[int(inst_id)]] = 1
    return Clip(
        clip_id=clip_id or f"clip_{spec.seed:06d}",
        frames=frames,
        presence=presence,
        instance_maps=id_maps,
        instance_classes=instance_classes,
        num_classes=spec.num_classes,
    )


def random_clip_spec(
    seed: int,
    num_frames: int,
    image_size: int = 128,
    num_classes: int = 7,
    objects_per_clip=(2, 3),
    max_tries: int = 200,
) -> ClipSpec:
    """Sample a clip with distinct classes whose objects never touch.

    Non-touching objects keep every instance a single connected component, so
    connectivity-based instance extraction is well posed on the ground truth.
    """
    rng = np.random.default_rng(seed)
    size = image_size
    for _ in range(max_tries):
        count = int(rng.integers(objects_per_clip[0], objects_per_clip[1] + 1))
        count = min(count, num_classes)
        classes = rng.choice(num_classes, size=count, replace=False)
        objects = []
        for c in classes:
            tip = size * rng.uniform(0.22, 0.28)
            x, y = rng.uniform(tip, size - tip, size=2)
            # shaft heads to the nearest border, like an instrument entering the view
            edge = np.argmin([x, size - x, y, size - y])
            base = (math.pi, 0.0, -math.pi / 2, math.pi / 2)[edge]
            angle = base + rng.uniform(-0.5, 0.5)
            speed = size * rng.uniform(0.01, 0.03)
            heading = rng.uniform(0, 2 * math.pi)
            objects.append(ObjectSpec(
                class_id=int(c),
                shape_kind="instrument",
                pose=(float(x), float(y), float(angle)),
                velocity=(speed * math.cos(heading), speed * math.sin(heading),
                          float(rng.uniform(-0.04, 0.04))),
                drift=float(rng.uniform(0.005, 0.02)),
                size=float(tip),
            ))
        spec = ClipSpec(seed=int(rng.integers(2**31)), num_frames=num_frames,
                        image_size=size, num_classes=num_classes, objects=tuple(objects))
        if _objects_separated(spec):
            return spec
    raise ConfigurationError(f"could not place non-touching objects after {max_tries} tries")


def _objects_separated(spec: ClipSpec, gap: int = 1) -> bool:
    """True when objects never touch and each one is a single 8-connected blob."""
    from scipy.ndimage import binary_dilation, label

    trajs = [_trajectory(o, spec.num_frames, spec.image_size) for o in spec.objects]
    for f in range(spec.num_frames):
        occupied = np.zeros((spec.image_size,) * 2, dtype=bool)
        for obj, traj in zip(spec.objects, trajs):
            tip, body = object_geometry(obj, traj[f], spec.image_size)
            m = tip | body
            if not tip.any() or label(m, structure=np.ones((3, 3), bool))[1] != 1:
                return False
            grown = binary_dilation(m, iterations=gap, structure=np.ones((3, 3), bool))
            if (grown & occupied).any():
                return False
            occupied |= m
    return True


def generate_dataset(
    num_clips: int,
    num_frames: int,
    image_size: int = 128,
    num_classes: int = 7,
    seed: int = 0,
    prefix: str = "clip",
) -> list[Clip]:
    """Generate ``num_clips`` clips; clip ``i`` depends only on ``(seed, i)``."""
    if num_clips < 0 or num_frames <= 0 or num_classes <= 0:
        raise ConfigurationError("num_clips >= 0, num_frames > 0 and num_classes > 0 required")
    clips = []
    for i in range(num_clips):
        clip_seed = int(np.random.default_rng([seed, i]).integers(2**31))
        spec = random_clip_spec(clip_seed, num_frames, image_size, num_classes)
        clips.append(generate_clip(spec, clip_id=f"{prefix}_{i:04d}"))
    return clips


# ----------------------------------------------------------------------------
# disk I/O


def default_class_names(num_classes):
    return [f"class_{i}" for i in range(num_classes)]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(clips, root, class_names=None) -> dict:
    """Write clips under ``root``; return the manifest stored in ``meta.json``."""
    root = Path(root)
    clips = list(clips)
    num_classes = clips[0].num_classes if clips else 0
    image_size = clips[0].image_size if clips else 0
    for clip in clips:
        if clip.num_classes != num_classes or clip.image_size != image_size:
            raise ConfigurationError("all clips of a dataset must share C and image size")
    meta = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "num_classes": num_classes,
        "class_names": list(class_names or default_class_names(num_classes)),
        "image_size": image_size,
        "clips": {},
    }
    try:
        for clip in clips:
            cdir = root / "clips" / clip.clip_id
            (cdir / "frames").mkdir(parents=True, exist_ok=True)
            (cdir / "masks").mkdir(parents=True, exist_ok=True)
            checksums = {}
            for f in range(len(clip)):
                fp = cdir / "frames" / f"{f:06d}.png"
                mp = cdir / "masks" / f"{f:06d}.png"
                Image.fromarray(clip.frames[f], mode="RGB").save(fp)
                Image.fromarray(clip.instance_maps[f].astype(np.uint16)).save(mp)
                checksums[fp.relative_to(root).as_posix()] = _sha256(fp)
                checksums[mp.relative_to(root).as_posix()] = _sha256(mp)
            lp = cdir / "labels.json"
            lp.write_text(json.dumps(clip.presence.astype(int).tolist()))
            checksums[lp.relative_to(root).as_posix()] = _sha256(lp)
            meta["clips"][clip.clip_id] = {
                "num_frames": len(clip),
                "instances": {str(k): int(v) for k, v in sorted(clip.instance_classes.items())},
                "checksums": checksums,
            }
        (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    except OSError as exc:
        raise DatasetIOError(f"cannot write dataset: {exc}", path=getattr(exc, "filename", None)) from exc
    return meta


def _check_file(root: Path, rel: str, checksums: dict) -> Path:
    path = root / rel
    if not path.is_file():
        raise DatasetIOError(f"missing file: {path}", path=str(path))
    expected = checksums.get(rel)
    if expected is not None and _sha256(path) != expected:
        raise DatasetIOError(f"checksum mismatch: {path}", path=str(path))
    return path


def read_meta(root) -> dict:
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise DatasetIOError(f"missing file: {meta_path}", path=str(meta_path))
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetIOError(f"malformed meta file {meta_path}: {exc}", path=str(meta_path)) from exc
    if meta.get("format") != FORMAT_TAG or meta.get("version") != FORMAT_VERSION:
        raise DatasetIOError(f"unsupported dataset format in {meta_path}", path=str(meta_path))
    return meta


def _read_clip(root: Path, clip_id: str, entry: dict, num_classes: int) -> Clip:
    checksums = entry.get("checksums", {})
    n = int(entry["num_frames"])
    cdir = f"clips/{clip_id}"
    lp = _check_file(root, f"{cdir}/labels.json", checksums)
    try:
        labels = np.asarray(json.loads(lp.read_text()))
    except (json.JSONDecodeError, ValueError) as exc:
        raise DatasetIOError(f"malformed label file {lp}: {exc}", path=str(lp)) from exc
    if labels.shape != (n, num_classes) or not np.isin(labels, (0, 1)).all():
        raise DatasetIOError(
            f"malformed label file {lp}: expected {n}x{num_classes} binary array",
            path=str(lp),
        )
    frames, masks = [], []
    for f in range(n):
        fp = _check_file(root, f"{cdir}/frames/{f:06d}.png", checksums)
        mp = _check_file(root, f"{cdir}/masks/{f:06d}.png", checksums)
        try:
            frames.append(np.asarray(Image.open(fp).convert("RGB")))
            masks.append(np.asarray(Image.open(mp)).astype(np.uint16))
        except OSError as exc:
            raise DatasetIOError(f"unreadable image {exc}", path=str(fp)) from exc
    return Clip(
        clip_id=clip_id,
        frames=np.stack(frames) if frames else np.zeros((0, 0, 0, 3), np.uint8),
        presence=labels.astype(np.uint8),
        instance_maps=np.stack(masks) if masks else np.zeros((0, 0, 0), np.uint16),
        instance_classes={int(k): int(v) for k, v in entry["instances"].items()},
        num_classes=num_classes,
    )


def read_dataset(root, num_workers: int = 1) -> list[Clip]:
    """Load every clip written by :func:`write_dataset`, verifying checksums.

    Up to ``num_workers`` clips are decoded concurrently; the result order is
    always the sorted clip-id order.
    """
    root = Path(root)
    meta = read_meta(root)
    num_classes = int(meta["num_classes"])
    ids = sorted(meta["clips"])
    load = lambda cid: _read_clip(root, cid, meta["clips"][cid], num_classes)  # noqa: E731
    if num_workers <= 1 or len(ids) <= 1:
        return [load(cid) for cid in ids]
    with ThreadPoolExecutor(max_workers=num_workers) as pool:
        return list(pool.map(load, ids))


def spec_to_dict(spec: ClipSpec) -> dict:
    return asdict(spec)
