"""Synthetic blob corpus: bright ellipses on a dark, smoothly textured background.

Every image comes with its exact ground-truth mask, tight per-blob boxes and a
text cue. Images that contain blobs also get a few isolated bright specks away from
the blobs; they are not part of the ground truth and give the confidence
filter something to reject. Blob-free ("normal") images stay speck-free:
with area-relative scoring a lone speck would be its image's top detection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import ndimage

Granularity = Literal["word", "sentence"]

WORD_PROMPTS = ("polyp",)
SENTENCE_PROMPTS = (
    "a bright rounded growth standing out from the dark tissue around it",
    "an oval pale lump raised above the surrounding darker surface",
    "a smooth light coloured bump with a clear edge against dark mucosa",
)

# relative to image size; keeps any two blob areas within a factor of 4
AXIS_RANGE = (0.06, 0.10)
_BLOB_TINT = np.array([1.0, 0.9, 0.85])
_BACKGROUND_TINT = np.array([1.0, 0.75, 0.7])


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float

    def rasterize(self, height: int, width: int) -> np.ndarray:
        rows, cols = np.mgrid[0:height, 0:width]
        dx = cols - self.cx
        dy = rows - self.cy
        c, s = np.cos(self.theta), np.sin(self.theta)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0


@dataclass
class SyntheticSample:
    id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    text: str
    boxes: list[tuple[int, int, int, int]] = field(default_factory=list)
    ellipses: list[Ellipse] = field(default_factory=list)


def tight_box(region: np.ndarray) -> tuple[int, int, int, int]:
    """Pixel-edge box ``(x1, y1, x2, y2)`` with exclusive right/bottom edges."""
    rows = np.flatnonzero(region.any(axis=1))
    cols = np.flatnonzero(region.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    tex = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 16)
    tex = (tex - tex.min()) / max(np.ptp(tex), 1e-12)
    lum = 0.05 + 0.2 * tex + 0.03 * rng.uniform(size=(size, size))
    return lum[..., None] * _BACKGROUND_TINT


def _place_ellipses(rng, size, count, gap=3, tries=200):
    placed: list[Ellipse] = []
    occupied = np.zeros((size, size), dtype=bool)
    lo, hi = AXIS_RANGE[0] * size, AXIS_RANGE[1] * size
    for _ in range(count):
        for _ in range(tries):
            a, b = rng.uniform(lo, hi, size=2)
            margin = max(a, b) + 2
            cx, cy = rng.uniform(margin, size - 1 - margin, size=2)
            e = Ellipse(float(cx), float(cy), float(a), float(b), float(rng.uniform(0, np.pi)))
            region = e.rasterize(size, size)
            if not region.any():
                continue
            if (ndimage.binary_dilation(region, iterations=gap) & occupied).any():
                continue
            placed.append(e)
            occupied |= region
            break
    return placed


def make_sample(rng: np.random.Generator, index: int, size: int = 128,
                granularity: Granularity = "word", min_blobs: int = 0,
                max_blobs: int = 3, speckles: int = 3) -> SyntheticSample:
    image = _background(rng, size)
    count = int(rng.integers(min_blobs, max_blobs + 1))
    ellipses = _place_ellipses(rng, size, count)
    mask = np.zeros((size, size), dtype=bool)
    boxes = []
    rows, cols = np.mgrid[0:size, 0:size]
    for e in ellipses:
        region = e.rasterize(size, size)
        level = rng.uniform(0.75, 0.95)
        rho2 = ((cols - e.cx) ** 2 + (rows - e.cy) ** 2) / max(e.a, e.b) ** 2
        shade = level * (1.0 - 0.15 * np.clip(rho2, 0.0, 1.0))
        image[region] = shade[region][:, None] * _BLOB_TINT
        mask |= region
        boxes.append(tight_box(region))

    keep_out = ndimage.binary_dilation(mask, iterations=3)
    for _ in range(speckles if ellipses else 0):
        for _ in range(50):
            r, c = rng.integers(0, size, size=2)
            if not keep_out[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2].any():
                image[r, c] = 0.9
                keep_out[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] = True
                break

    prompts = WORD_PROMPTS if granularity == "word" else SENTENCE_PROMPTS
    text = prompts[int(rng.integers(len(prompts)))]
    return SyntheticSample(id=f"synth_{index:04d}", image=image.astype(np.float32),
                           mask=mask.astype(np.uint8), text=text, boxes=boxes,
                           ellipses=ellipses)


def make_synthetic_corpus(n: int, seed: int = 0, size: int = 128,
                          granularity: Granularity = "word", min_blobs: int = 0,
                          max_blobs: int = 3, speckles: int = 3) -> list[SyntheticSample]:
    """Generate ``n`` samples deterministically from ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if granularity not in ("word", "sentence"):
        raise ValueError(f"granularity must be 'word' or 'sentence', got {granularity!r}")
    rng = np.random.default_rng(seed)
    return [make_sample(rng, i, size, granularity, min_blobs, max_blobs, speckles)
            for i in range(n)]
