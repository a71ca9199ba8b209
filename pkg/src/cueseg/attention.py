"""Text-vision hybrid attention: the building blocks of one decoder layer.

Layout conventions (a leading batch axis is always present):

* spatial features are ``(B, C, H, W)``
* token sequences are ``(B, L, C)``
* position encodings are unbatched: ``(H*W, C)`` for spatial, ``(L, C)`` for tokens

A layer runs, in order: level fusion, text projection, vision self-attention,
text-to-vision cross-attention, vision-to-text cross-attention, channel
attention. Every norm-and-add step applies LayerNorm to the attention branch
*before* adding the residual (``LayerNorm(attn(x)) + x``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError, NumericDomainError, ShapeError

ChannelAttnMode = Literal["add_as_written", "scale_cbam"]
CHANNEL_ATTN_MODES = ("add_as_written", "scale_cbam")


@dataclass
class AttentionConfig:
    num_heads: int = 8
    channels_per_layer: tuple[int, int, int] = (64, 32, 32)
    channel_attn_mode: ChannelAttnMode = "add_as_written"
    channel_attn_reduction: int = 16
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.channels_per_layer = tuple(int(c) for c in self.channels_per_layer)
        if self.num_heads < 1:
            raise ConfigError(f"num_heads must be >= 1, got {self.num_heads}")
        if len(self.channels_per_layer) != 3:
            raise ConfigError(
                f"channels_per_layer needs 3 entries, got {self.channels_per_layer}")
        for j, c in enumerate(self.channels_per_layer, start=1):
            if c < 1 or c % self.num_heads:
                raise ConfigError(
                    f"decoder layer {j}: {c} channels not divisible by {self.num_heads} heads")
        if self.channel_attn_mode not in CHANNEL_ATTN_MODES:
            raise ConfigError(f"unknown channel_attn_mode {self.channel_attn_mode!r}")
        if self.channel_attn_reduction < 1:
            raise ConfigError("channel_attn_reduction must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


# ---------------------------------------------------------------------------
# position encodings
# ---------------------------------------------------------------------------

def _sinusoid(positions: Tensor, channels: int) -> Tensor:
    # channel i uses frequency 1 / 10000^(2*(i//2)/channels); even -> sin, odd -> cos
    idx = torch.arange(channels, dtype=positions.dtype, device=positions.device)
    freq = torch.pow(10000.0, -2.0 * torch.div(idx, 2, rounding_mode="floor") / max(channels, 1))
    angles = positions[:, None] * freq[None, :]
    return torch.where(idx.long() % 2 == 0, torch.sin(angles), torch.cos(angles))


def token_position_encoding(length: int, channels: int, *, dtype=torch.float32,
                            device=None) -> Tensor:
    """Fixed 1-D sinusoidal encoding, shape ``(length, channels)``."""
    pos = torch.arange(length, dtype=dtype, device=device)
    return _sinusoid(pos, channels)


def spatial_position_encoding(height: int, width: int, channels: int, *,
                              dtype=torch.float32, device=None) -> Tensor:
    """Fixed 2-D sinusoidal encoding in row-major order, shape ``(height*width, channels)``.

    The first ``channels // 2`` channels encode the row, the rest the column.
    """
    cy = channels // 2
    cx = channels - cy
    rows = torch.arange(height, dtype=dtype, device=device).repeat_interleave(width)
    cols = torch.arange(width, dtype=dtype, device=device).repeat(height)
    parts = []
    if cy:
        parts.append(_sinusoid(rows, cy))
    parts.append(_sinusoid(cols, cx))
    return torch.cat(parts, dim=1)


# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------

def flatten_spatial(v: Tensor) -> Tensor:
    """``(B, C, H, W)`` -> ``(B, H*W, C)``, row-major over (H, W)."""
    if v.dim() != 4:
        raise ShapeError(f"expected a (B, C, H, W) feature, got shape {tuple(v.shape)}")
    return v.flatten(2).transpose(1, 2)


def unflatten_spatial(x: Tensor, height: int, width: int) -> Tensor:
    b, n, c = x.shape
    if n != height * width:
        raise ShapeError(f"cannot unflatten {n} tokens into {height}x{width}")
    return x.transpose(1, 2).reshape(b, c, height, width)


def _check_pos(pos: Tensor, expected: tuple[int, int], what: str) -> None:
    if tuple(pos.shape) != expected:
        raise ShapeError(f"{what} position encoding has shape {tuple(pos.shape)}, "
                         f"expected {expected}")


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class TextProjection(nn.Module):
    """Aligns text embeddings with a decoder layer's channel count.

    Per-token 1x1 convolution, GELU, linear map, then ReLU, so the output is
    non-negative.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv1d(in_channels, out_channels, kernel_size=1)
        self.linear = nn.Linear(out_channels, out_channels)

    def forward(self, t: Tensor) -> Tensor:
        if not torch.isfinite(t).all():
            raise NumericDomainError("text embedding contains non-finite values")
        x = self.conv(t.transpose(1, 2)).transpose(1, 2)
        return F.relu(self.linear(F.gelu(x)))


class LevelFusion(nn.Module):
    """Upsample the coarser feature 2x (bilinear), concatenate the finer one,
    and mix channels with a 1x1 convolution."""

    def __init__(self, high_channels: int, low_channels: int, out_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(high_channels + low_channels, out_channels, kernel_size=1)

    def forward(self, v_high: Tensor, v_low: Tensor) -> Tensor:
        hh, hw = v_high.shape[-2:]
        lh, lw = v_low.shape[-2:]
        if (lh, lw) != (2 * hh, 2 * hw):
            raise ShapeError(
                f"low-level feature {tuple(v_low.shape)} must be exactly twice the "
                f"spatial size of high-level feature {tuple(v_high.shape)}")
        up = F.interpolate(v_high, size=(lh, lw), mode="bilinear", align_corners=False)
        return self.proj(torch.cat([up, v_low], dim=1))


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with learned query/key/value/output maps.

    The key map has no bias: softmax cancels it, so it could never learn.
    """

    def __init__(self, channels: int, num_heads: int = 8, dropout: float = 0.0):
        super().__init__()
        if channels % num_heads:
            raise ConfigError(f"{channels} channels not divisible by {num_heads} heads")
        self.channels = channels
        self.num_heads = num_heads
        self.head_dim = channels // num_heads
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels, bias=False)
        self.v_proj = nn.Linear(channels, channels)
        self.out_proj = nn.Linear(channels, channels)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, query: Tensor, key: Tensor, value: Tensor,
                key_padding_mask: Optional[Tensor] = None,
                return_weights: bool = False):
        """``key_padding_mask`` is ``(B, Lk)`` with True marking ignored keys.

        Returns the ``(B, Lq, C)`` output, plus the ``(B, heads, Lq, Lk)``
        weights when ``return_weights`` is set.
        """
        if query.shape[-1] != self.channels or key.shape[-1] != self.channels:
            raise ShapeError(
                f"query {tuple(query.shape)} / key {tuple(key.shape)} channels must "
                f"equal {self.channels}")
        if value.shape[-1] != self.channels:
            raise ShapeError(f"value {tuple(value.shape)} channels must equal {self.channels}")
        if key.shape[1] != value.shape[1]:
            raise ShapeError(f"key length {key.shape[1]} != value length {value.shape[1]}")

        b, lq, _ = query.shape
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))

        scores = (q / math.sqrt(self.head_dim)) @ k.transpose(-2, -1)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        weights = scores.softmax(dim=-1)
        out = self.dropout(weights) @ v
        out = self.out_proj(out.transpose(1, 2).reshape(b, lq, self.channels))
        if return_weights:
            return out, weights
        return out


class VisionSelfAttention(nn.Module):
    """``LayerNorm(MHSA(f_v)) + f_v`` with position added to query and key only."""

    def __init__(self, channels: int, num_heads: int = 8, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(channels, num_heads, dropout)
        self.norm = nn.LayerNorm(channels, eps=1e-5)

    def forward(self, f_v: Tensor, pos_v: Optional[Tensor] = None) -> Tensor:
        _, c, h, w = f_v.shape
        x = flatten_spatial(f_v)
        if pos_v is None:
            pos_v = spatial_position_encoding(h, w, c, dtype=x.dtype, device=x.device)
        _check_pos(pos_v, (h * w, c), "image")
        qk = x + pos_v
        out = self.norm(self.attn(qk, qk, x)) + x
        return unflatten_spatial(out, h, w)


class TextToVisionAttention(nn.Module):
    """Text tokens query the image: ``LayerNorm(MHCA(f_t, f_v)) + f_t``."""

    def __init__(self, channels: int, num_heads: int = 8, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(channels, num_heads, dropout)
        self.norm = nn.LayerNorm(channels, eps=1e-5)

    def forward(self, f_t: Tensor, f_v: Tensor, pos_t: Optional[Tensor] = None,
                pos_v: Optional[Tensor] = None) -> Tensor:
        _, c, h, w = f_v.shape
        if f_t.shape[-1] != c:
            raise ShapeError(f"text channels {f_t.shape[-1]} != image channels {c}")
        x = flatten_spatial(f_v)
        length = f_t.shape[1]
        if pos_t is None:
            pos_t = token_position_encoding(length, c, dtype=x.dtype, device=x.device)
        if pos_v is None:
            pos_v = spatial_position_encoding(h, w, c, dtype=x.dtype, device=x.device)
        _check_pos(pos_t, (length, c), "text")
        _check_pos(pos_v, (h * w, c), "image")
        return self.norm(self.attn(f_t + pos_t, x + pos_v, x)) + f_t


class VisionToTextAttention(nn.Module):
    """Image locations query the text: ``LayerNorm(MHCA(f_v, f_t)) + f_v``."""

    def __init__(self, channels: int, num_heads: int = 8, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(channels, num_heads, dropout)
        self.norm = nn.LayerNorm(channels, eps=1e-5)

    def forward(self, f_v: Tensor, f_t: Tensor, pos_v: Optional[Tensor] = None,
                pos_t: Optional[Tensor] = None,
                text_padding_mask: Optional[Tensor] = None) -> Tensor:
        _, c, h, w = f_v.shape
        if f_t.shape[-1] != c:
            raise ShapeError(f"text channels {f_t.shape[-1]} != image channels {c}")
        x = flatten_spatial(f_v)
        length = f_t.shape[1]
        if pos_t is None:
            pos_t = token_position_encoding(length, c, dtype=x.dtype, device=x.device)
        if pos_v is None:
            pos_v = spatial_position_encoding(h, w, c, dtype=x.dtype, device=x.device)
        _check_pos(pos_t, (length, c), "text")
        _check_pos(pos_v, (h * w, c), "image")
        out = self.norm(self.attn(x + pos_v, f_t + pos_t, f_t,
                                  key_padding_mask=text_padding_mask)) + x
        return unflatten_spatial(out, h, w)


class CrossModalAttention(nn.Module):
    """Dual-way cross-modal attention: vision self-attention, then text-to-vision,
    then vision-to-text. Returns ``(f_mix, f_t_prime)``."""

    def __init__(self, channels: int, num_heads: int = 8, dropout: float = 0.0):
        super().__init__()
        self.self_attn = VisionSelfAttention(channels, num_heads, dropout)
        self.text_to_vision = TextToVisionAttention(channels, num_heads, dropout)
        self.vision_to_text = VisionToTextAttention(channels, num_heads, dropout)

    def forward(self, f_v: Tensor, f_t: Tensor, pos_v: Optional[Tensor] = None,
                pos_t: Optional[Tensor] = None,
                text_padding_mask: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
        _, c, h, w = f_v.shape
        if pos_v is None:
            pos_v = spatial_position_encoding(h, w, c, dtype=f_v.dtype, device=f_v.device)
        if pos_t is None:
            pos_t = token_position_encoding(f_t.shape[1], c, dtype=f_t.dtype,
                                            device=f_t.device)
        f_v1 = self.self_attn(f_v, pos_v)
        f_t1 = self.text_to_vision(f_t, f_v1, pos_t, pos_v)
        f_mix = self.vision_to_text(f_v1, f_t1, pos_v, pos_t, text_padding_mask)
        return f_mix, f_t1


class ChannelAttention(nn.Module):
    """Channel gating from global average and max pooling through one shared
    bottleneck (C -> C/r -> C) and a sigmoid.

    ``add_as_written`` returns ``gate + x``; ``scale_cbam`` returns ``gate * x + x``.
    """

    def __init__(self, channels: int, reduction: int = 16,
                 mode: ChannelAttnMode = "add_as_written"):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigError(
                f"channel-attention reduction {reduction} does not divide {channels} channels")
        if mode not in CHANNEL_ATTN_MODES:
            raise ConfigError(f"unknown channel attention mode {mode!r}")
        self.mode = mode
        hidden = channels // reduction
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, kernel_size=1),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, kernel_size=1),
        )

    def gate(self, x: Tensor) -> Tensor:
        avg = x.mean(dim=(2, 3), keepdim=True)
        mx = x.amax(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))

    def forward(self, x: Tensor) -> Tensor:
        w = self.gate(x)
        if self.mode == "add_as_written":
            return w + x
        return w * x + x


class TVHALayer(nn.Module):
    """One text-vision hybrid attention decoder layer.

    ``use_cma=False`` drops the three attention blocks (and the text
    projection that only they consume); ``use_ca=False`` passes ``f_mix``
    through untouched.
    """

    def __init__(self, high_channels: int, low_channels: int, text_channels: int,
                 out_channels: int, cfg: AttentionConfig, *, use_cma: bool = True,
                 use_ca: bool = True, index: int | None = None):
        super().__init__()
        self.index = index
        try:
            self.fuse = LevelFusion(high_channels, low_channels, out_channels)
            self.text_proj = TextProjection(text_channels, out_channels) if use_cma else None
            self.cma = (CrossModalAttention(out_channels, cfg.num_heads, cfg.dropout_rate)
                        if use_cma else None)
            self.channel_attn = (ChannelAttention(out_channels, cfg.channel_attn_reduction,
                                                  cfg.channel_attn_mode)
                                 if use_ca else None)
        except (ConfigError, ShapeError) as exc:
            raise type(exc)(f"decoder layer {index}: {exc}") from exc

    def forward(self, v_high: Tensor, v_low: Tensor, t: Tensor,
                text_padding_mask: Optional[Tensor] = None) -> Tensor:
        try:
            f = self.fuse(v_high, v_low)
            if self.cma is not None:
                f_t = self.text_proj(t)
                f, _ = self.cma(f, f_t, text_padding_mask=text_padding_mask)
            if self.channel_attn is not None:
                f = self.channel_attn(f)
            return f
        except (ShapeError, NumericDomainError) as exc:
            if self.index is None:
                raise
            raise type(exc)(f"decoder layer {self.index}: {exc}") from exc
