"""Multi-class-token vision transformer, CAM extraction and projection heads."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, NumericFault

NORM_EPS = 1e-8


STEMS = ("linear", "conv")


@dataclass
class EncoderConfig:
    image_size: int = 128
    patch_size: int = 8
    embed_dim: int = 192
    depth: int = 6
    heads: int = 3
    num_classes: int = 7
    projection_dim: int = 64
    mlp_ratio: float = 4.0
    tau_proto: float = 0.1
    use_pos_embed: bool = True
    stem: str = "linear"  # "linear" patchify or "conv" (stride-2 3x3 stack)

    def __post_init__(self):
        if self.stem not in STEMS:
            raise ConfigurationError(f"stem must be one of {STEMS}, got {self.stem!r}")
        if self.stem == "conv" and self.patch_size & (self.patch_size - 1):
            raise ConfigurationError("the conv stem needs a power-of-two patch_size")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if min(self.depth, self.num_classes, self.projection_dim, self.heads) <= 0:
            raise ConfigurationError("depth, num_classes, projection_dim and heads must be positive")
        if self.tau_proto <= 0:
            raise ConfigurationError("tau_proto must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2


@dataclass
class TokenBundle:
    """Encoder output for a batch of frames.

    ``class_tokens[:, C]`` is the background token. ``attentions`` holds one
    head-averaged ``(B, T, T)`` map per layer with the ``C + 1`` class tokens
    first and the patch tokens after them.
    """

    patch_tokens: torch.Tensor  # (B, N, D)
    class_tokens: torch.Tensor  # (B, C + 1, D)
    attentions: list
    grid: tuple

    @property
    def num_classes(self) -> int:
        return self.class_tokens.shape[1] - 1

    def class_to_patch(self, layer: int) -> torch.Tensor:
        k = self.class_tokens.shape[1]
        return self.attentions[layer][:, :k, k:]

    def patch_to_patch(self, layer: int) -> torch.Tensor:
        k = self.class_tokens.shape[1]
        return self.attentions[layer][:, k:, k:]


@dataclass
class CamStack:
    maps: np.ndarray  # (B, C, h, w) patch grid, values in [0, 1]
    upsampled: np.ndarray  # (B, C, H, W)

    def __getitem__(self, idx) -> "CamStack":
        return CamStack(self.maps[idx : idx + 1], self.upsampled[idx : idx + 1])

    def __len__(self):
        return len(self.maps)


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x / (x.norm(dim=dim, keepdim=True) + NORM_EPS)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out), attn.mean(dim=1)


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        y, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


class ProjectionHead(nn.Module):
    """Two-layer MLP followed by L2 normalisation."""

    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, in_dim), nn.GELU(), nn.Linear(in_dim, out_dim))

    def forward(self, x):
        return l2_normalize(self.net(x))


def make_stem(kind: str, dim: int, patch_size: int) -> nn.Module:
    """Map ``(B, 3, H, W)`` images to a ``(B, dim, H/p, W/p)`` token grid.

    The conv stem halves the resolution ``log2(p)`` times with 3x3 convolutions,
    which keeps each token's receptive field local to its patch neighbourhood.
    """
    if kind == "linear":
        return nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)
    layers, ch = [], 3
    n = patch_size.bit_length() - 1
    for i in range(n):
        out = max(dim // 2 ** (n - i), 16)
        layers += [nn.Conv2d(ch, out, 3, stride=2, padding=1), nn.GELU()]
        ch = out
    layers.append(nn.Conv2d(ch, dim, 1))
    return nn.Sequential(*layers)


class MultiClassTokenViT(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c, d = config.num_classes, config.embed_dim
        self.patch_embed = make_stem(config.stem, d, config.patch_size)
        self.class_tokens = nn.Parameter(torch.zeros(1, c + 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_patches, d))
        self.cls_pos_embed = nn.Parameter(torch.zeros(1, c + 1, d))
        self.blocks = nn.ModuleList(Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm = nn.LayerNorm(d)
        # per-class linear classifier on the instrument class tokens
        self.head_weight = nn.Parameter(torch.zeros(c, d))
        self.head_bias = nn.Parameter(torch.zeros(c))
        self.patch_head = nn.Linear(d, c)  # 1x1 conv over the patch grid
        self.patch_proj = nn.Linear(d, config.projection_dim)  # g
        self.proj_local = ProjectionHead(d, config.projection_dim)  # P^l
        self.proj_global = ProjectionHead(d, config.projection_dim)  # P^g, EMA only
        self._init_weights()
        self.proj_global.load_state_dict(self.proj_local.state_dict())
        for p in self.proj_global.parameters():
            p.requires_grad_(False)

    def _init_weights(self):
        nn.init.trunc_normal_(self.class_tokens, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_pos_embed, std=0.02)
        nn.init.trunc_normal_(self.head_weight, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    # -- encoding -------------------------------------------------------------

    def _pos_embed_for(self, h, w):
        g = self.config.grid
        if (h, w) == (g, g):
            return self.pos_embed
        pe = self.pos_embed.reshape(1, g, g, -1).permute(0, 3, 1, 2)
        pe = F.interpolate(pe, size=(h, w), mode="bicubic", align_corners=False)
        return pe.permute(0, 2, 3, 1).reshape(1, h * w, -1)

    def encode(self, images: torch.Tensor, crop: bool = False) -> TokenBundle:
        """Encode ``(B, 3, H, W)`` images.

        Full frames must match the configured size. With ``crop=True`` any
        size divisible by the patch size is accepted and the position
        embedding is resampled to the crop grid.
        """
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != 3:
            raise ConfigurationError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if crop:
            if h % cfg.patch_size or w % cfg.patch_size:
                raise ConfigurationError(f"crop {h}x{w} not divisible by patch {cfg.patch_size}")
        elif (h, w) != (cfg.image_size, cfg.image_size):
            raise ConfigurationError(
                f"frame is {h}x{w}, encoder expects {cfg.image_size}x{cfg.image_size}"
            )
        x = self.patch_embed(images)
        gh, gw = x.shape[-2:]
        x = x.flatten(2).transpose(1, 2)
        if cfg.use_pos_embed:
            x = x + self._pos_embed_for(gh, gw)
        cls = (self.class_tokens + self.cls_pos_embed).expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1)
        attentions = []
        for blk in self.blocks:
            x, attn = blk(x)
            attentions.append(attn)
        x = self.norm(x)
        k = cfg.num_classes + 1
        return TokenBundle(x[:, k:], x[:, :k], attentions, (gh, gw))

    forward = encode

    # -- heads ----------------------------------------------------------------

    def classify(self, bundle: TokenBundle) -> torch.Tensor:
        """Per-class logits from the instrument class tokens only."""
        c = self.config.num_classes
        logits = (bundle.class_tokens[:, :c] * self.head_weight).sum(-1) + self.head_bias
        if not torch.isfinite(logits).all():
            raise NumericFault("non-finite classification logits", component="classify")
        return logits

    def patch_logits(self, bundle: TokenBundle) -> torch.Tensor:
        """Image logits of the patch branch: average-pooled patch scores."""
        return self.patch_head(bundle.patch_tokens).mean(dim=1)

    def patch_scores(self, bundle: TokenBundle) -> torch.Tensor:
        """Rectified class score of every patch token, ``(B, C, N)``."""
        return F.relu(self.patch_head(bundle.patch_tokens)).transpose(1, 2)

    def extract_cam(self, bundle: TokenBundle, image_size=None) -> CamStack:
        with torch.no_grad():
            c = self.config.num_classes
            layers = cam_layers(len(bundle.attentions))
            attn = torch.stack([bundle.class_to_patch(i)[:, :c] for i in layers]).mean(0)
            affinity = torch.stack([bundle.patch_to_patch(i) for i in layers]).mean(0)
            cams = fuse_cam(attn, self.patch_scores(bundle), affinity)
            gh, gw = bundle.grid
            maps = cams.reshape(cams.shape[0], c, gh, gw)
            size = image_size or (gh * self.config.patch_size, gw * self.config.patch_size)
            if isinstance(size, int):
                size = (size, size)
            up = F.interpolate(maps, size=size, mode="bilinear", align_corners=False).clamp(0, 1)
        return CamStack(maps.cpu().numpy(), up.cpu().numpy())

    def prototypes(self, bundle: TokenBundle) -> torch.Tensor:
        """Projected, normalised class tokens (background included), ``(B, C+1, d)``."""
        return l2_normalize(self.patch_proj(bundle.class_tokens))

    def prototype_similarity(self, patch_tokens, class_tokens) -> torch.Tensor:
        """Cosine similarity of projected patches to projected prototypes, ``(..., N, C+1)``."""
        z = l2_normalize(self.patch_proj(patch_tokens))
        p = l2_normalize(self.patch_proj(class_tokens))
        return z @ p.transpose(-2, -1)

    def project_patch(self, patch_tokens, class_tokens) -> torch.Tensor:
        sim = self.prototype_similarity(patch_tokens, class_tokens)
        return (sim / self.config.tau_proto).softmax(dim=-1)

    def project_class_local(self, class_tokens) -> torch.Tensor:
        return self.proj_local(class_tokens[..., : self.config.num_classes, :])

    def project_class_global(self, class_tokens) -> torch.Tensor:
        with torch.no_grad():
            return self.proj_global(class_tokens[..., : self.config.num_classes, :])


def cam_layers(depth: int) -> list[int]:
    """Indices of the last half of the layers (at least one)."""
    return list(range(depth // 2, depth)) if depth > 1 else [0]


def fuse_cam(class_attn, patch_scores, affinity) -> torch.Tensor:
    """Combine attention and patch scores into normalised maps.

    ``class_attn`` and ``patch_scores`` are ``(B, C, N)``; ``affinity`` is the
    ``(B, N, N)`` patch-to-patch attention. The product map is smoothed once
    by the row-normalised affinity and min-max scaled per class. Constant
    maps become all zeros.
    """
    raw = class_attn * patch_scores
    aff = affinity / affinity.sum(-1, keepdim=True).clamp_min(1e-12)
    refined = raw @ aff.transpose(-2, -1)
    return minmax_normalize(refined)


def minmax_normalize(x: torch.Tensor) -> torch.Tensor:
    lo = x.min(dim=-1, keepdim=True).values
    hi = x.max(dim=-1, keepdim=True).values
    span = hi - lo
    flat = span <= 1e-9 * torch.maximum(hi.abs(), lo.abs()) + 1e-12
    out = (x - lo) / torch.where(flat, torch.ones_like(span), span)
    return torch.where(flat, torch.zeros_like(out), out)


FRAME_MEAN = 0.5
FRAME_STD = 0.25


def frames_to_tensor(frames: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(B, H, W, 3)`` uint8 -> normalised ``(B, 3, H, W)`` tensor."""
    x = torch.from_numpy(np.ascontiguousarray(frames)).to(dtype) / 255.0
    if x.ndim == 3:
        x = x[None]
    return ((x - FRAME_MEAN) / FRAME_STD).permute(0, 3, 1, 2).contiguous()


def copy_head(head: nn.Module) -> nn.Module:
    return copy.deepcopy(head)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def grid_side(n: int) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise ConfigurationError(f"{n} patches do not form a square grid")
    return side
