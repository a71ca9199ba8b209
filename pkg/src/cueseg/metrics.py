"""Per-image IoU / Dice and their dataset (macro) means."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError


def _counts(pred, gt) -> tuple[int, int, int]:
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
    inter = int(np.count_nonzero(p & g))
    return inter, int(np.count_nonzero(p)), int(np.count_nonzero(g))


def iou(pred, gt) -> float:
    """|pred & gt| / |pred | gt|; two empty masks score 1.0."""
    inter, np_, ng = _counts(pred, gt)
    union = np_ + ng - inter
    return 1.0 if union == 0 else inter / union


def dice(pred, gt) -> float:
    """2|pred & gt| / (|pred| + |gt|); two empty masks score 1.0."""
    inter, np_, ng = _counts(pred, gt)
    total = np_ + ng
    return 1.0 if total == 0 else 2 * inter / total


@dataclass
class ImageScore:
    id: str
    iou: float
    dice: float


@dataclass
class MetricReport:
    per_image: list[ImageScore] = field(default_factory=list)
    miou: float = 0.0
    mdice: float = 0.0
    n: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "iou", "dice"])
        for s in self.per_image:
            writer.writerow([s.id, repr(s.iou), repr(s.dice)])
        return buf.getvalue()

    def summary(self) -> str:
        return f"n={self.n} mIoU={100 * self.miou:.2f}% mDice={100 * self.mdice:.2f}%"


def evaluate(pairs: Iterable[Sequence]) -> MetricReport:
    """Score ``(pred, gt, id)`` triples; means are unweighted over images."""
    scores = []
    for pred, gt, ident in pairs:
        try:
            scores.append(ImageScore(str(ident), iou(pred, gt), dice(pred, gt)))
        except ShapeError as exc:
            raise ShapeError(f"image {ident!r}: {exc}") from exc
    if not scores:
        raise ValueError("evaluate needs at least one (pred, gt, id) triple")
    return MetricReport(
        per_image=scores,
        miou=float(np.mean([s.iou for s in scores])),
        mdice=float(np.mean([s.dice for s in scores])),
        n=len(scores),
    )
