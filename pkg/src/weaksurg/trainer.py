"""Training loop, checkpoints and staged evaluation.

Randomness is drawn from generators keyed by ``(seed, stream, step)`` rather
than from long-lived state, so a run resumed from a checkpoint and an
ablation with different loss switches see the same frame pairs in the same
order as an uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .encoder import EncoderConfig, MultiClassTokenViT, frames_to_tensor
from .errors import CheckpointError, ConfigurationError, DatasetIOError, NumericFault
from .metrics import classification_map, instance_ap, semantic_scores
from .pseudomask import cam_to_seed, refine, seed_to_instances
from .sampler import sample_gap, sample_local_crops, uncertain_mask
from .structures import instances_to_labelmap

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml

logger = logging.getLogger(__name__)

CHECKPOINT_TAG = "weaksurg-checkpoint"
CHECKPOINT_VERSION = 1
STAGES = ("cam_seed", "pseudo_mask")

_STREAM_ORDER, _STREAM_PAIRS, _STREAM_CROPS = 0, 1, 2


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.05
    batch_size: int = 8
    epochs: int = 30
    warmup_epochs: float = 1.0
    grad_clip: float = 1.0
    delta_max: int = 4
    num_crops: int = 4
    crop_size: int = 48
    tau_sim: float = 0.07
    tau_ctsc: float = 0.1
    tau_proto: float = 0.1
    sinkhorn_eps: float = 0.05
    sinkhorn_iters: int = 3
    window_k: int = 7
    ema_momentum: float = 0.999
    theta_bg: float = 0.3
    uncertain_low: float = 0.35
    uncertain_high: float = 0.55
    crop_cam_threshold: float = 0.5
    crop_min_fraction: float = 0.05
    min_area_frac: float = 0.001
    patch_cls_loss: bool = True
    w_cls: float = 1.0
    w_pter: float = 1.0
    w_ctsc: float = 1.0
    enable_pter: bool = True
    enable_ctsc: bool = True
    seed: int = 0
    patch_size: int = 8
    embed_dim: int = 192
    depth: int = 6
    heads: int = 3
    projection_dim: int = 64
    stem: str = "linear"

    def __post_init__(self):
        positive = ("lr", "batch_size", "delta_max", "num_crops", "crop_size", "tau_sim",
                    "tau_ctsc", "tau_proto", "sinkhorn_eps", "window_k", "patch_size",
                    "embed_dim", "depth", "heads", "projection_dim")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0 or self.sinkhorn_iters < 0 or self.warmup_epochs < 0:
            raise ConfigurationError("epochs, sinkhorn_iters and warmup_epochs must be >= 0")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigurationError("ema_momentum must lie in [0, 1]")
        if not 0.0 <= self.uncertain_low <= self.uncertain_high <= 1.0:
            raise ConfigurationError("need 0 <= uncertain_low <= uncertain_high <= 1")
        if self.window_k % 2 == 0:
            raise ConfigurationError("window_k must be odd")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Read a ``.toml`` file, or JSON for any other suffix."""
        path = Path(path)
        if not path.is_file():
            raise DatasetIOError(f"missing config file: {path}", path=str(path))
        text = path.read_text()
        try:
            data = _toml.loads(text) if path.suffix.lower() == ".toml" else json.loads(text)
        except ValueError as exc:  # both decoders raise ValueError subclasses
            raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"config {path} must hold a table of TrainConfig fields")
        return cls.from_dict(data)

    def encoder_config(self, image_size: int, num_classes: int) -> EncoderConfig:
        return EncoderConfig(
            image_size=image_size,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depth=self.depth,
            heads=self.heads,
            num_classes=num_classes,
            projection_dim=self.projection_dim,
            tau_proto=self.tau_proto,
            stem=self.stem,
        )


@dataclass
class RunRecord:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    stages: dict = field(default_factory=dict)

    def loss_trace(self, key="overall"):
        return [s[key] if key == "overall" else s["losses"].get(key) for s in self.steps]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for s in self.steps:
                fh.write(json.dumps({"kind": "step", **s}) + "\n")
            for e in self.epochs:
                fh.write(json.dumps({"kind": "epoch", **e}) + "\n")
            for name, report in self.stages.items():
                fh.write(json.dumps({"kind": "stage", "stage": name, "report": report}) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "RunRecord":
        rec = cls()
        for line in Path(path).read_text().splitlines():
            obj = json.loads(line)
            kind = obj.pop("kind")
            if kind == "step":
                rec.steps.append(obj)
            elif kind == "epoch":
                rec.epochs.append(obj)
            else:
                rec.stages[obj["stage"]] = obj["report"]
        return rec


def _rng(seed, stream, index):
    return np.random.default_rng([seed, stream, index])


class Trainer:
    """Owns the model, optimizer and step counter of one training run."""

    def __init__(self, config: TrainConfig, clips):
        if not clips:
            raise ConfigurationError("training needs at least one clip")
        self.config = config
        self.clips = list(clips)
        self.num_classes = self.clips[0].num_classes
        self.image_size = self.clips[0].image_size
        if any(len(c) < 2 for c in self.clips):
            raise ConfigurationError("every training clip needs at least two frames")
        torch.manual_seed(config.seed)
        self.model = MultiClassTokenViT(config.encoder_config(self.image_size, self.num_classes))
        params = [p for p in self.model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
        self.targets = [(ci, f) for ci, clip in enumerate(self.clips) for f in range(len(clip))]
        self.steps_per_epoch = math.ceil(len(self.targets) / config.batch_size)
        self.total_steps = self.steps_per_epoch * config.epochs
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, self._lr_factor)
        self.step = 0
        self.record = RunRecord()
        self._order_cache = (None, None)

    def _lr_factor(self, step):
        warm = self.config.warmup_epochs * self.steps_per_epoch
        if step < warm:
            return (step + 1) / warm
        span = max(self.total_steps - warm, 1)
        return 0.5 * (1 + math.cos(math.pi * min((step - warm) / span, 1.0)))

    def _epoch_order(self, epoch):
        if self._order_cache[0] != epoch:
            perm = _rng(self.config.seed, _STREAM_ORDER, epoch).permutation(len(self.targets))
            self._order_cache = (epoch, perm)
        return self._order_cache[1]

    def batch_for_step(self, step):
        """``(target, reference)`` index pairs ``(clip, frame)`` for ``step``."""
        epoch, pos = divmod(step, self.steps_per_epoch)
        order = self._epoch_order(epoch)
        b = self.config.batch_size
        idx = order[pos * b : (pos + 1) * b]
        rng = _rng(self.config.seed, _STREAM_PAIRS, step)
        pairs = []
        for i in idx:
            ci, f = self.targets[i]
            ref = sample_gap(len(self.clips[ci]), f, self.config.delta_max, rng)
            pairs.append((ci, f, ref))
        return pairs

    # -- one optimisation step --------------------------------------------------

    def train_step(self) -> dict:
        cfg = self.config
        model = self.model
        model.train()
        pairs = self.batch_for_step(self.step)
        clips = self.clips
        tgt_frames = np.stack([clips[ci].frames[f] for ci, f, _ in pairs])
        tgt_presence = torch.from_numpy(np.stack([clips[ci].presence[f] for ci, f, _ in pairs]))
        ref_presence = np.stack([clips[ci].presence[r] for ci, _, r in pairs])

        bundle_t = model.encode(frames_to_tensor(tgt_frames))
        l_cls = losses.mlsm_loss(model.classify(bundle_t), tgt_presence)
        if cfg.patch_cls_loss:
            l_cls = l_cls + losses.mlsm_loss(model.patch_logits(bundle_t), tgt_presence)
        l_pter = l_ctsc = None

        if cfg.enable_pter or cfg.enable_ctsc:
            ref_frames = np.stack([clips[ci].frames[r] for ci, _, r in pairs])
            with torch.no_grad():
                bundle_r = model.encode(frames_to_tensor(ref_frames))

        if cfg.enable_pter:
            l_pter = self._pter(bundle_r, bundle_t, ref_presence)

        if cfg.enable_ctsc:
            l_ctsc = self._ctsc(bundle_r, bundle_t, ref_frames, ref_presence, tgt_presence)

        total = losses.overall_loss(l_cls, l_pter, l_ctsc, (cfg.w_cls, cfg.w_pter, cfg.w_ctsc))
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                [p for p in model.parameters() if p.requires_grad], cfg.grad_clip
            )
        lr = self.optimizer.param_groups[0]["lr"]
        steps_before = self._optimizer_steps()
        self.optimizer.step()
        self.scheduler.step()
        if cfg.enable_ctsc:
            # EMA strictly after the optimizer step of this iteration
            assert self._optimizer_steps() == steps_before + 1, "EMA before optimizer step"
            losses.ema_update(model.proj_global, model.proj_local, cfg.ema_momentum)

        entry = {
            "step": self.step,
            "epoch": self.step // self.steps_per_epoch,
            "lr": lr,
            "losses": {"cls": float(l_cls.detach())},
            "overall": float(total.detach()),
        }
        if l_pter is not None:
            entry["losses"]["pter"] = float(l_pter.detach())
        if l_ctsc is not None:
            entry["losses"]["ctsc"] = float(l_ctsc.detach())
            if self._ctsc_positives == 0:
                entry["flags"] = ["ctsc: no positives"]
                logger.info("step %d: ctsc has no positive pairs", self.step)
        self.record.steps.append(entry)
        self.step += 1
        return entry

    def _optimizer_steps(self):
        states = [s.get("step") for s in self.optimizer.state.values()]
        states = [float(s) for s in states if s is not None]
        return max(states) if states else 0

    def _pter(self, bundle_r, bundle_t, ref_presence):
        cfg, model = self.config, self.model
        z_r = bundle_r.patch_tokens.detach()
        sim = losses.spatial_similarity(z_r, bundle_t.patch_tokens, cfg.tau_sim)
        masked = losses.neighborhood_mask(sim, cfg.window_k)
        with torch.no_grad():
            scores = model.prototype_similarity(z_r, bundle_r.class_tokens)
            assign = []
            for b in range(scores.shape[0]):
                allowed = torch.ones(self.num_classes + 1, dtype=torch.bool)
                allowed[: self.num_classes] = torch.from_numpy(ref_presence[b].astype(bool))
                assign.append(losses.sinkhorn_assign(scores[b], cfg.sinkhorn_eps,
                                                     cfg.sinkhorn_iters, allowed))
            assign = torch.stack(assign)
        probs = model.project_patch(bundle_t.patch_tokens, bundle_t.class_tokens)
        return losses.pter_loss(assign, masked, probs)

    def _ctsc(self, bundle_r, bundle_t, ref_frames, ref_presence, tgt_presence):
        cfg, model = self.config, self.model
        rng = _rng(cfg.seed, _STREAM_CROPS, self.step)
        cams = model.extract_cam(bundle_r, self.image_size).upsampled
        crops, pseudo = [], []
        for b in range(len(ref_frames)):
            cam = cams[b] * ref_presence[b][:, None, None]
            unc = uncertain_mask(cam, cfg.uncertain_low, cfg.uncertain_high)
            cs = sample_local_crops(
                ref_frames[b], unc, cam, ref_presence[b], cfg.num_crops, cfg.crop_size, rng,
                cfg.crop_cam_threshold, cfg.crop_min_fraction,
            )
            crops.append(cs.crops)
            pseudo.append(cs.pseudo_presence)
        crops = np.concatenate(crops)
        local_bundle = model.encode(frames_to_tensor(crops), crop=True)
        b, l, c = len(ref_frames), cfg.num_crops, self.num_classes
        x_local = model.project_class_local(local_bundle.class_tokens).reshape(b, l, c, -1)
        x_global = model.project_class_global(bundle_t.class_tokens)
        batch = losses.contrast_batch(x_local, x_global, torch.from_numpy(np.stack(pseudo)),
                                      tgt_presence, cfg.tau_ctsc)
        self._ctsc_positives = int(batch.positives.sum())
        return losses.ctsc_loss(batch)

    # -- loop -------------------------------------------------------------------

    def fit(self, epochs=None, progress=None) -> RunRecord:
        end = self.total_steps if epochs is None else min(
            self.total_steps, self.steps_per_epoch * epochs)
        while self.step < end:
            try:
                self.train_step()
            except NumericFault as exc:
                logger.error("aborting at step %d: %s", self.step, exc)
                raise
            if self.step % self.steps_per_epoch == 0:
                epoch = self.step // self.steps_per_epoch - 1
                cmap = self.classification_map()
                self.record.epochs.append({"epoch": epoch, "cls_map": cmap})
                logger.info("epoch %d  cls mAP %.4f  loss %.4f", epoch, cmap,
                            self.record.steps[-1]["overall"])
                if progress:
                    progress(epoch, cmap)
        return self.record

    def classification_map(self, clips=None) -> float:
        clips = self.clips if clips is None else clips
        scores, labels = [], []
        self.model.eval()
        with torch.no_grad():
            for clip in clips:
                for s in range(0, len(clip), 32):
                    bundle = self.model.encode(frames_to_tensor(clip.frames[s : s + 32]))
                    scores.append(self.model.classify(bundle).numpy())
                    labels.append(clip.presence[s : s + 32])
        return classification_map(np.concatenate(scores), np.concatenate(labels))

    # -- checkpoints --------------------------------------------------------------

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_TAG,
            "version": CHECKPOINT_VERSION,
            "encoder_config": asdict(self.model.config),
            "train_config": asdict(self.config),
            "model": self.model.state_dict(),
            "ema_head": self.model.proj_global.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "step": self.step,
            "record": {"steps": self.record.steps, "epochs": self.record.epochs},
            "dataset": [c.clip_id for c in self.clips],
        }

    def save(self, path) -> None:
        torch.save(self.state(), path)

    @classmethod
    def resume(cls, path, clips) -> "Trainer":
        ckpt = read_checkpoint(path)
        trainer = cls(TrainConfig.from_dict(ckpt["train_config"]), clips)
        if ckpt["dataset"] != [c.clip_id for c in trainer.clips]:
            raise CheckpointError("checkpoint was trained on a different dataset", path=str(path))
        if asdict(trainer.model.config) != ckpt["encoder_config"]:
            raise CheckpointError("encoder configuration does not match checkpoint", path=str(path))
        trainer.model.load_state_dict(ckpt["model"])
        trainer.optimizer.load_state_dict(ckpt["optimizer"])
        trainer.scheduler.load_state_dict(ckpt["scheduler"])
        trainer.step = int(ckpt["step"])
        trainer.record = RunRecord(list(ckpt["record"]["steps"]), list(ckpt["record"]["epochs"]))
        return trainer


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint: {path}", path=str(path))
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises several unrelated types on corrupt files
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}", path=str(path)) from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_TAG:
        raise CheckpointError(f"{path} is not a checkpoint of this package", path=str(path))
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has format-version {ckpt.get('version')}, expected {CHECKPOINT_VERSION}",
            path=str(path),
        )
    return ckpt


def load_model(path) -> tuple[MultiClassTokenViT, TrainConfig]:
    ckpt = read_checkpoint(path)
    try:
        model = MultiClassTokenViT(EncoderConfig(**ckpt["encoder_config"]))
        model.load_state_dict(ckpt["model"])
        config = TrainConfig.from_dict(ckpt["train_config"])
    except (KeyError, TypeError, RuntimeError, ConfigurationError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}", path=str(path)) from exc
    model.eval()
    return model, config


def train(config: TrainConfig, clips, out_dir=None, progress=None):
    """Train from scratch; optionally write ``checkpoint.pt`` and ``run_record.jsonl``."""
    trainer = Trainer(config, clips)
    record = trainer.fit(progress=progress)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trainer.save(out / "checkpoint.pt")
        record.write_jsonl(out / "run_record.jsonl")
    return trainer, record


# -- staged evaluation --------------------------------------------------------------


class ModelCams:
    """CAM provider backed by a trained encoder."""

    def __init__(self, model, batch_size=32):
        self.model = model
        self.batch_size = batch_size

    def __call__(self, clip) -> np.ndarray:
        self.model.eval()
        out = []
        with torch.no_grad():
            for s in range(0, len(clip), self.batch_size):
                bundle = self.model.encode(frames_to_tensor(clip.frames[s : s + self.batch_size]))
                out.append(self.model.extract_cam(bundle, clip.image_size).upsampled)
        return np.concatenate(out)


def oracle_cams(clip) -> np.ndarray:
    """CAMs equal to 1 inside each class's GT pixels and 0 elsewhere."""
    maps = np.stack([clip.label_map(f) for f in range(len(clip))])
    classes = np.arange(1, clip.num_classes + 1)
    return (maps[:, None] == classes[None, :, None, None]).astype(np.float64)


def evaluate_stage(cam_source, clips, stage: str, config: TrainConfig | None = None,
                   refiner=None, class_names=None) -> dict:
    """Semantic metrics for ``cam_seed``; semantic and instance metrics for ``pseudo_mask``."""
    if stage not in STAGES:
        raise ConfigurationError(f"unknown stage {stage!r}; expected one of {STAGES}")
    clips = list(clips)
    if not clips or sum(len(c) for c in clips) == 0:
        raise ConfigurationError("evaluation needs a non-empty dataset")
    config = config or TrainConfig()
    num_classes = clips[0].num_classes
    sem_pred, sem_gt, inst_pred, inst_gt = [], [], [], []
    for clip in clips:
        cams = cam_source(clip)
        for f in range(len(clip)):
            seed = cam_to_seed(cams[f], clip.presence[f], config.theta_bg)
            gt_map = clip.label_map(f)
            if stage == "cam_seed":
                sem_pred.append(seed)
            else:
                inst = seed_to_instances(seed, cams[f], config.min_area_frac)
                inst = refine(inst, clip.frames[f], refiner)
                sem_pred.append(instances_to_labelmap(inst, seed.shape))
                inst_pred.append(inst)
                inst_gt.append(clip.frame_instances(f))
            sem_gt.append(gt_map)
    sem = semantic_scores(sem_pred, sem_gt, num_classes)
    names = class_names or [f"class_{i}" for i in range(num_classes)]
    report = {
        "stage": stage,
        "num_frames": len(sem_gt),
        "semantic": sem.as_dict(),
        "class_table": {names[c]: sem.class_iou.get(c) for c in range(num_classes)},
    }
    if stage == "pseudo_mask":
        ap = instance_ap(inst_pred, inst_gt, num_classes)
        report["instance"] = ap.as_dict()
        report["instance_class_table"] = {names[c]: ap.class_ap.get(c) for c in range(num_classes)}
    return report
