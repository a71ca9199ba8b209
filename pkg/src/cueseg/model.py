"""Text-guided segmentation network.

A convolutional pyramid encoder (1/4 .. 1/32 scale) and a small text encoder
feed three decoder layers; a subpixel head turns the 1/4-scale output into
full-resolution mask logits. Either encoder can be swapped for a pretrained
adapter as long as it honours the same output contract.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .attention import AttentionConfig, LevelFusion, TVHALayer
from .errors import ConfigError, ShapeError, TokenizationError
from .text import PAD_ID, batch_token_ids

Ablation = Literal["full", "no_tvha", "no_cma", "no_ca"]
ABLATIONS = ("full", "no_tvha", "no_cma", "no_ca")
PYRAMID_STRIDES = (4, 8, 16, 32)


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (128, 128)
    pyramid_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    ablation: Ablation = "full"
    text_vocab_size: int = 4096
    text_dim: int = 64
    text_max_len: int = 32
    text_layers: int = 1
    text_heads: int = 4

    def __post_init__(self):
        if isinstance(self.attention, dict):
            self.attention = AttentionConfig(**self.attention)
        self.image_size = tuple(int(s) for s in self.image_size)
        self.pyramid_channels = tuple(int(c) for c in self.pyramid_channels)
        if len(self.image_size) != 2 or any(s <= 0 or s % 32 for s in self.image_size):
            raise ConfigError(f"image_size {self.image_size} must be positive multiples of 32")
        if len(self.pyramid_channels) != 4:
            raise ConfigError("pyramid_channels needs four entries (C1..C4)")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.text_vocab_size <= 2:
            raise ConfigError("text_vocab_size must exceed 2")
        if self.text_dim % self.text_heads:
            raise ConfigError("text_dim must be divisible by text_heads")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class ConvBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.dw = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.norm = nn.GroupNorm(1, channels)
        self.pw1 = nn.Conv2d(channels, 2 * channels, 1)
        self.pw2 = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, x):
        return x + self.pw2(F.gelu(self.pw1(self.norm(self.dw(x)))))


class ConvPyramidEncoder(nn.Module):
    """Patchify stem (stride 4) followed by three stride-2 stages."""

    def __init__(self, channels: Sequence[int] = (32, 64, 128, 256), in_channels: int = 3):
        super().__init__()
        self.channels = tuple(channels)
        stages = []
        prev = in_channels
        for i, c in enumerate(self.channels):
            k = 4 if i == 0 else 2
            stages.append(nn.Sequential(nn.Conv2d(prev, c, k, stride=k),
                                        nn.GroupNorm(1, c), ConvBlock(c)))
            prev = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return tuple(feats)


class TextEncoder(nn.Module):
    """Embedding table, learned positions and a pre-norm transformer stack."""

    def __init__(self, vocab_size: int, dim: int = 64, max_len: int = 32,
                 num_layers: int = 1, num_heads: int = 4):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.dim = dim
        self.embed = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(dim, num_heads, 2 * dim, dropout=0.0,
                                           activation="gelu", batch_first=True,
                                           norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, num_layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)

    def forward(self, token_ids: Tensor) -> Tensor:
        if token_ids.dim() == 1:
            token_ids = token_ids[None]
        if token_ids.dtype not in (torch.int64, torch.int32):
            raise TokenizationError(f"token ids must be integers, got {token_ids.dtype}")
        length = token_ids.shape[1]
        if not 1 <= length <= self.max_len:
            raise TokenizationError(f"token length {length} outside [1, {self.max_len}]")
        bad = (token_ids < 0) | (token_ids >= self.vocab_size)
        if bad.any():
            pos = tuple(int(i) for i in bad.nonzero()[0])
            raise TokenizationError(
                f"token id {int(token_ids[pos])} at index {pos} is outside the "
                f"vocabulary [0, {self.vocab_size})")
        mask = token_ids == PAD_ID
        if mask.all(dim=1).any():
            raise TokenizationError("a token sequence consists only of padding")
        x = self.embed(token_ids) + self.pos[:length]
        x = self.encoder(x, src_key_padding_mask=mask)
        return self.norm(x)


class PlainFusionLayer(nn.Module):
    """UNet-style decoder layer: level fusion and a nonlinearity, text ignored."""

    def __init__(self, high_channels: int, low_channels: int, out_channels: int,
                 index: int | None = None):
        super().__init__()
        self.index = index
        self.fuse = LevelFusion(high_channels, low_channels, out_channels)

    def forward(self, v_high, v_low, t=None, text_padding_mask=None):
        try:
            return F.gelu(self.fuse(v_high, v_low))
        except ShapeError as exc:
            raise ShapeError(f"decoder layer {self.index}: {exc}") from exc


class SubpixelHead(nn.Module):
    """3x3 conv expanding channels x scale^2, pixel shuffle, 1x1 map to one logit."""

    def __init__(self, in_channels: int, scale: int = 4):
        super().__init__()
        self.expand = nn.Conv2d(in_channels, in_channels * scale * scale, 3, padding=1)
        self.shuffle = nn.PixelShuffle(scale)
        self.proj = nn.Conv2d(in_channels, 1, kernel_size=1)

    def shuffle_and_project(self, x: Tensor) -> Tensor:
        return self.proj(self.shuffle(x))

    def forward(self, x: Tensor) -> Tensor:
        return self.shuffle_and_project(self.expand(x))


class Decoder(nn.Module):
    """Layer 1 fuses (v4, v3), layer 2 (layer 1, v2), layer 3 (layer 2, v1)."""

    def __init__(self, pyramid_channels: Sequence[int], text_channels: int,
                 cfg: AttentionConfig, ablation: Ablation = "full"):
        super().__init__()
        c1, c2, c3, c4 = pyramid_channels
        d1, d2, d3 = cfg.channels_per_layer
        self.pyramid_channels = tuple(pyramid_channels)
        specs = [(c4, c3, d1), (d1, c2, d2), (d2, c1, d3)]
        layers = []
        for j, (high, low, out) in enumerate(specs, start=1):
            if ablation == "no_tvha":
                layers.append(PlainFusionLayer(high, low, out, index=j))
            else:
                layers.append(TVHALayer(high, low, text_channels, out, cfg,
                                        use_cma=ablation != "no_cma",
                                        use_ca=ablation != "no_ca", index=j))
        self.layers = nn.ModuleList(layers)
        self.head = SubpixelHead(d3)

    def forward(self, pyramid: Sequence[Tensor], t: Tensor,
                text_padding_mask: Optional[Tensor] = None) -> Tensor:
        if len(pyramid) != 4:
            raise ShapeError(f"expected a 4-level pyramid, got {len(pyramid)} levels")
        for level, (feat, c) in enumerate(zip(pyramid, self.pyramid_channels), start=1):
            if feat.shape[1] != c:
                layer = {1: 3, 2: 2, 3: 1, 4: 1}[level]
                raise ShapeError(f"decoder layer {layer}: pyramid level v{level} has "
                                 f"{feat.shape[1]} channels, config expects {c}")
        v1, v2, v3, v4 = pyramid
        x = v4
        for layer, low in zip(self.layers, (v3, v2, v1)):
            x = layer(x, low, t, text_padding_mask)
        return self.head(x)


class TextGuidedSegmenter(nn.Module):
    """Image + token ids -> ``(B, 1, H, W)`` mask logits."""

    def __init__(self, cfg: ModelConfig, image_encoder: nn.Module | None = None,
                 text_encoder: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = image_encoder or ConvPyramidEncoder(cfg.pyramid_channels)
        self.text_encoder = text_encoder or TextEncoder(
            cfg.text_vocab_size, cfg.text_dim, cfg.text_max_len,
            cfg.text_layers, cfg.text_heads)
        self.decoder = Decoder(cfg.pyramid_channels, cfg.text_dim, cfg.attention, cfg.ablation)
        self.text_frozen = False

    def freeze_text(self, frozen: bool = True) -> None:
        self.text_frozen = frozen
        for p in self.text_encoder.parameters():
            p.requires_grad_(not frozen)
        if frozen:
            self.text_encoder.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        if self.text_frozen:
            self.text_encoder.eval()
        return self

    def tokenize(self, texts: Sequence[str]) -> Tensor:
        return batch_token_ids(texts, self.cfg.text_vocab_size, self.cfg.text_max_len)

    def encode_image(self, images: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected images shaped (B, 3, H, W), got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"image size {h}x{w} must be divisible by 32")
        pyramid = tuple(self.image_encoder(images))
        for feat, stride in zip(pyramid, PYRAMID_STRIDES):
            if tuple(feat.shape[-2:]) != (h // stride, w // stride):
                raise ShapeError(f"encoder level at stride {stride} has spatial size "
                                 f"{tuple(feat.shape[-2:])}, expected {(h // stride, w // stride)}")
        return pyramid

    def encode_text(self, token_ids: Tensor) -> Tensor:
        return self.text_encoder(token_ids)

    def decode(self, pyramid, t: Tensor, text_padding_mask: Optional[Tensor] = None) -> Tensor:
        return self.decoder(pyramid, t, text_padding_mask)

    def forward(self, images: Tensor, token_ids: Tensor) -> Tensor:
        pyramid = self.encode_image(images)
        if token_ids.dim() == 1:
            token_ids = token_ids[None]
        t = self.encode_text(token_ids)
        return self.decode(pyramid, t, token_ids == PAD_ID)


def build_model(cfg: ModelConfig, seed: int | None = None) -> TextGuidedSegmenter:
    if seed is not None:
        torch.manual_seed(seed)
    return TextGuidedSegmenter(cfg)


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters()
               if p.requires_grad or not trainable_only)


def predict_mask(logits, threshold: float = 0.5) -> np.ndarray:
    """Binary mask where ``sigmoid(logits) > threshold`` (strict), as uint8."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    x = torch.as_tensor(logits).detach()
    return (torch.sigmoid(x.double()) > threshold).to(torch.uint8).cpu().numpy()


def images_to_tensor(images: Sequence[np.ndarray]) -> Tensor:
    """Stack ``(H, W, 3)`` arrays into a ``(B, 3, H, W)`` float32 tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
