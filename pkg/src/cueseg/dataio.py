"""Data model and persistence.

Grounding records are stored one JSON object per line, in this canonical
layout (keys always in this order)::

    {"filename": "images/a.png", "height": 128, "width": 128,
     "grounding": {"caption": "polyp",
                   "regions": [{"bbox": [20, 20, 30, 30], "phrase": "polyp"}]}}

Boxes are absolute pixels ``[x1, y1, x2, y2]``. A dataset directory holds
``images/<id>.png``, ``masks/<id>.png`` (single channel, 0/255),
``records.jsonl`` and optionally ``splits/{train,val,test}.txt``.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, DataError, NumericDomainError, ParseError

SPLIT_NAMES = ("train", "val", "test")
RECORDS_FILE = "records.jsonl"


@dataclass
class Region:
    bbox: list  # [x1, y1, x2, y2], ints or floats
    phrase: str


@dataclass
class GroundingRecord:
    image_path: str
    width: int
    height: int
    text: str
    regions: list[Region] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "filename": self.image_path,
            "height": self.height,
            "width": self.width,
            "grounding": {
                "caption": self.text,
                "regions": [{"bbox": list(r.bbox), "phrase": r.phrase} for r in self.regions],
            },
        }


@dataclass
class SegSample:
    id: str
    image: np.ndarray
    text: str
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mask is not None and self.mask.shape[:2] != self.image.shape[:2]:
            raise DataError(f"sample {self.id}: mask {self.mask.shape} and image "
                            f"{self.image.shape} differ in size")


# ---------------------------------------------------------------------------
# grounding records
# ---------------------------------------------------------------------------

def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _require(obj: dict, key: str, kind, line: int | None, path: str):
    if key not in obj:
        raise ParseError("missing required field", line, f"{path}{key}")
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ParseError(f"expected {getattr(kind, '__name__', kind)}, got "
                         f"{type(value).__name__}", line, f"{path}{key}")
    return value


def record_from_dict(obj, line: int | None = None) -> GroundingRecord:
    if not isinstance(obj, dict):
        raise ParseError("record must be a JSON object", line, "")
    filename = _require(obj, "filename", str, line, "")
    height = _require(obj, "height", int, line, "")
    width = _require(obj, "width", int, line, "")
    if height <= 0 or width <= 0:
        raise ParseError("image size must be positive", line, "height" if height <= 0 else "width")
    grounding = _require(obj, "grounding", dict, line, "")
    caption = _require(grounding, "caption", str, line, "grounding.")
    raw_regions = _require(grounding, "regions", list, line, "grounding.")

    regions = []
    for i, reg in enumerate(raw_regions):
        path = f"grounding.regions[{i}]"
        if not isinstance(reg, dict):
            raise ParseError("region must be an object", line, path)
        bbox = _require(reg, "bbox", list, line, path + ".")
        phrase = _require(reg, "phrase", str, line, path + ".")
        if not phrase.strip():
            raise ParseError("phrase must be non-empty", line, path + ".phrase")
        if len(bbox) != 4 or not all(_is_number(v) for v in bbox):
            raise ParseError("bbox must be four finite numbers", line, path + ".bbox")
        x1, y1, x2, y2 = bbox
        if not (x1 < x2 and y1 < y2):
            raise ParseError(f"bbox ordering requires x1 < x2 and y1 < y2, got {bbox}",
                             line, path + ".bbox")
        if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
            raise ParseError(f"bbox {bbox} outside image bounds {width}x{height}",
                             line, path + ".bbox")
        regions.append(Region(list(bbox), phrase))
    return GroundingRecord(filename, width, height, caption, regions)


def parse_grounding_record(line: str, line_number: int | None = None) -> GroundingRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg} (column {exc.colno})", line_number) from exc
    return record_from_dict(obj, line_number)


def serialize_grounding_record(record: GroundingRecord) -> str:
    return json.dumps(record.to_dict(), ensure_ascii=False)


def read_grounding_file(path) -> list[GroundingRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                records.append(parse_grounding_record(line.rstrip("\n"), n))
    return records


def write_grounding_file(path, records: Iterable[GroundingRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(serialize_grounding_record(rec) + "\n")


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        r = tuple(float(x) for x in self.ratios)
        if len(r) != 3 or any(x <= 0 or not math.isfinite(x) for x in r):
            raise ConfigError(f"split ratios must be three positive numbers, got {self.ratios}")
        total = sum(r)
        self.ratios = tuple(x / total for x in r)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "SplitSpec":
        """Parse ``"8:1:1"`` style ratios."""
        try:
            parts = tuple(float(p) for p in text.split(":"))
        except ValueError as exc:
            raise ConfigError(f"cannot parse split ratios {text!r}") from exc
        return cls(parts, seed)


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    quotas = [n * r for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    # stable sort: ties go to the earlier split
    order = sorted(range(len(ratios)), key=lambda i: quotas[i] - sizes[i], reverse=True)
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(ids: Sequence[str], spec: SplitSpec = SplitSpec()
                  ) -> tuple[list[str], list[str], list[str]]:
    ids = list(ids)
    if not ids:
        raise DataError("cannot split an empty id list")
    seen, dups = set(), []
    for i in ids:
        if i in seen:
            dups.append(i)
        seen.add(i)
    if dups:
        raise DataError(f"duplicate ids: {sorted(set(dups))}")
    shuffled = ids[:]
    random.Random(spec.seed).shuffle(shuffled)
    n_train, n_val, _ = largest_remainder(len(ids), spec.ratios)
    return (shuffled[:n_train], shuffled[n_train:n_train + n_val],
            shuffled[n_train + n_val:])


def write_split_manifests(out_dir, splits: Sequence[Sequence[str]]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, ids in zip(SPLIT_NAMES, splits):
        (out / f"{name}.txt").write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


def read_id_list(path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()
            if ln.strip()]


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

def resize_pair(image: np.ndarray, mask: Optional[np.ndarray], size: tuple[int, int]):
    """Resize to ``size = (H, W)``: bilinear for the image, nearest for the mask.

    Aspect ratio is not preserved. Same-size inputs are returned untouched.
    """
    h, w = size
    if h <= 0 or w <= 0 or h % 32 or w % 32:
        raise ConfigError(f"target size {size} must be positive multiples of 32")
    if image.shape[:2] == (h, w):
        return image, mask
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    image_out = out[0].permute(1, 2, 0).numpy().clip(0.0, 1.0)
    mask_out = None
    if mask is not None:
        m = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.uint8))[None, None].float()
        mask_out = F.interpolate(m, size=(h, w), mode="nearest-exact")[0, 0].numpy()
        mask_out = mask_out.astype(np.uint8)
    return image_out, mask_out


# ---------------------------------------------------------------------------
# image / mask files
# ---------------------------------------------------------------------------

def save_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[-1] == 1:
        m = m[..., 0]
    if m.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise NumericDomainError("mask must be binary (values 0 or 1)")
    Image.fromarray((m.astype(np.uint8) * 255), mode="L").save(path)


def load_mask(path) -> np.ndarray:
    """Read a single-channel mask; pixels above 127 are foreground."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc
    return (arr > 127).astype(np.uint8)


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def write_corpus(out_dir, samples) -> list[GroundingRecord]:
    """Write samples (with ``id, image, mask, text, boxes``) as a dataset directory."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        save_image(out / "images" / f"{s.id}.png", s.image)
        if s.mask is not None:
            save_mask(out / "masks" / f"{s.id}.png", s.mask)
        h, w = s.image.shape[:2]
        regions = [Region(list(b), s.text) for b in getattr(s, "boxes", [])]
        records.append(GroundingRecord(f"images/{s.id}.png", w, h, s.text, regions))
    write_grounding_file(out / RECORDS_FILE, records)
    return records


def record_id(record: GroundingRecord) -> str:
    return Path(record.image_path).stem


def load_samples(data_dir, ids: Optional[Sequence[str]] = None, mask_dir: str = "masks",
                 require_masks: bool = True) -> list[SegSample]:
    root = Path(data_dir)
    rec_path = root / RECORDS_FILE
    if not rec_path.exists():
        raise DataError(f"{rec_path} not found")
    records = {record_id(r): r for r in read_grounding_file(rec_path)}
    wanted = list(records) if ids is None else list(ids)
    samples = []
    for i in wanted:
        if i not in records:
            raise DataError(f"id {i!r} has no record in {rec_path}")
        rec = records[i]
        image = load_image(root / rec.image_path)
        mask_path = root / mask_dir / f"{i}.png"
        mask = None
        if mask_path.exists():
            mask = load_mask(mask_path)
        elif require_masks:
            raise DataError(f"missing mask {mask_path}")
        samples.append(SegSample(i, image, rec.text, mask))
    return samples
