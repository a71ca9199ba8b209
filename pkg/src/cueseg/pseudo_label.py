"""Text cue -> scored boxes -> pseudo-mask.

The pipeline is written against two small interfaces, :class:`CueConverter`
(image + text -> scored boxes) and :class:`MaskGenerator` (image + boxes ->
binary mask). Deterministic desk-scale implementations live here
(:class:`BlobConverter`, :class:`RegionMaskGenerator`); adapters for
pretrained grounding detectors and promptable segmenters are loaded by name
and only import their heavy dependencies when first called.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .errors import ConfigError

DEFAULT_SCORE_THRESHOLD = 0.25
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ScoredBox:
    """Absolute-pixel box; ``x2``/``y2`` are exclusive pixel edges."""

    x1: float
    y1: float
    x2: float
    y2: float
    score: float
    phrase: str = ""

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def clamp(self, width: int, height: int) -> "ScoredBox":
        return ScoredBox(min(max(self.x1, 0.0), width), min(max(self.y1, 0.0), height),
                         min(max(self.x2, 0.0), width), min(max(self.y2, 0.0), height),
                         self.score, self.phrase)

    def to_dict(self) -> dict:
        return asdict(self)


@runtime_checkable
class CueConverter(Protocol):
    name: str

    def __call__(self, image: np.ndarray, text: str) -> list[ScoredBox]: ...


@runtime_checkable
class MaskGenerator(Protocol):
    name: str

    def __call__(self, image: np.ndarray, boxes: Sequence[ScoredBox]) -> np.ndarray: ...


class DegenerateBoxWarning(UserWarning):
    pass


def luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., :3] @ _LUMA


def filter_boxes(boxes: Sequence[ScoredBox],
                 threshold: float = DEFAULT_SCORE_THRESHOLD) -> list[ScoredBox]:
    """Keep boxes whose score is strictly above ``threshold``, in order."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"score threshold must lie in [0, 1], got {threshold}")
    return [b for b in boxes if b.score > threshold]


# ---------------------------------------------------------------------------
# desk-scale converter and masker
# ---------------------------------------------------------------------------

def blob_converter(image: np.ndarray, text: str,
                   intensity_threshold: float = 0.5) -> list[ScoredBox]:
    """Boxes around 4-connected bright components, scored by relative area."""
    if not 0.0 < intensity_threshold < 1.0:
        raise ConfigError("intensity_threshold must lie in (0, 1)")
    labels, count = ndimage.label(luminance(image) > intensity_threshold)
    if count == 0:
        return []
    areas = np.bincount(labels.ravel())[1:]
    largest = areas.max()
    boxes = []
    for k, sl in enumerate(ndimage.find_objects(labels)):
        rows, cols = sl
        boxes.append(ScoredBox(float(cols.start), float(rows.start), float(cols.stop),
                               float(rows.stop), float(areas[k] / largest), text))
    return boxes


class BlobConverter:
    name = "blob"

    def __init__(self, intensity_threshold: float = 0.5):
        self.intensity_threshold = intensity_threshold

    def __call__(self, image, text):
        return blob_converter(image, text, self.intensity_threshold)


def _largest_component(binary: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(binary)
    if count == 0:
        return binary
    areas = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(areas)) + 1)


def region_mask_generator(image: np.ndarray, boxes: Sequence[ScoredBox]) -> np.ndarray:
    """Otsu-threshold the luminance inside each box, keep the largest component,
    and take the union. Boxes under 4 px are skipped with a
    :class:`DegenerateBoxWarning`."""
    lum = luminance(image)
    h, w = lum.shape
    mask = np.zeros((h, w), dtype=bool)
    for i, box in enumerate(boxes):
        c0 = max(int(math.floor(box.x1)), 0)
        r0 = max(int(math.floor(box.y1)), 0)
        c1 = min(int(math.ceil(box.x2)), w)
        r1 = min(int(math.ceil(box.y2)), h)
        if max(c1 - c0, 0) * max(r1 - r0, 0) < 4:
            warnings.warn(DegenerateBoxWarning(f"box {i} {box.xyxy()} covers fewer than 4 px"),
                          stacklevel=2)
            continue
        crop = lum[r0:r1, c0:c1]
        if np.ptp(crop) == 0:
            fg = np.ones_like(crop, dtype=bool)
        else:
            fg = _largest_component(crop > threshold_otsu(crop))
        mask[r0:r1, c0:c1] |= fg
    return mask.astype(np.uint8)


class RegionMaskGenerator:
    name = "region"

    def __call__(self, image, boxes):
        return region_mask_generator(image, boxes)


# ---------------------------------------------------------------------------
# pretrained adapters (optional, lazily loaded)
# ---------------------------------------------------------------------------

class GroundingDinoConverter:
    """Zero-shot grounding detector through ``transformers``.

    Returns every detection (no score cut); confidence filtering is left to
    :func:`filter_boxes`.
    """

    name = "grounding-dino"

    def __init__(self, model_id: str = "IDEA-Research/grounding-dino-tiny",
                 device: str = "cpu", text_threshold: float = 0.0):
        self.model_id = model_id
        self.device = device
        self.text_threshold = text_threshold
        self._processor = None
        self._model = None

    def _load(self):
        from transformers import AutoModelForZeroShotObjectDetection, AutoProcessor

        self._processor = AutoProcessor.from_pretrained(self.model_id)
        self._model = AutoModelForZeroShotObjectDetection.from_pretrained(self.model_id)
        self._model.to(self.device).eval()

    def __call__(self, image, text):
        import torch
        from PIL import Image

        if self._model is None:
            self._load()
        h, w = image.shape[:2]
        pil = Image.fromarray(np.clip(np.round(image * 255), 0, 255).astype(np.uint8))
        prompt = text.lower().strip()
        if not prompt.endswith("."):
            prompt += "."
        inputs = self._processor(images=pil, text=prompt, return_tensors="pt").to(self.device)
        with torch.no_grad():
            outputs = self._model(**inputs)
        result = self._processor.post_process_grounded_object_detection(
            outputs, inputs.input_ids, threshold=0.0, text_threshold=self.text_threshold,
            target_sizes=[(h, w)])[0]
        boxes = []
        for (x1, y1, x2, y2), score in zip(result["boxes"].tolist(), result["scores"].tolist()):
            box = ScoredBox(x1, y1, x2, y2, float(min(max(score, 0.0), 1.0)), text).clamp(w, h)
            if box.area > 0:
                boxes.append(box)
        return boxes


class SamMaskGenerator:
    """Box-prompted segment-anything model through ``transformers``.

    One mask per box (highest predicted IoU of the three candidates), merged
    by union and clipped to the box union.
    """

    name = "sam"

    def __init__(self, model_id: str = "facebook/sam-vit-base", device: str = "cpu"):
        self.model_id = model_id
        self.device = device
        self._processor = None
        self._model = None

    def _load(self):
        from transformers import SamModel, SamProcessor

        self._processor = SamProcessor.from_pretrained(self.model_id)
        self._model = SamModel.from_pretrained(self.model_id).to(self.device).eval()

    def __call__(self, image, boxes):
        import torch
        from PIL import Image

        h, w = image.shape[:2]
        mask = np.zeros((h, w), dtype=bool)
        if not boxes:
            return mask.astype(np.uint8)
        if self._model is None:
            self._load()
        pil = Image.fromarray(np.clip(np.round(image * 255), 0, 255).astype(np.uint8))
        inputs = self._processor(pil, input_boxes=[[list(b.xyxy()) for b in boxes]],
                                 return_tensors="pt").to(self.device)
        with torch.no_grad():
            outputs = self._model(**inputs, multimask_output=True)
        masks = self._processor.image_processor.post_process_masks(
            outputs.pred_masks.cpu(), inputs["original_sizes"].cpu(),
            inputs["reshaped_input_sizes"].cpu())[0]
        best = outputs.iou_scores[0].argmax(dim=-1).cpu()
        inside = np.zeros((h, w), dtype=bool)
        for i, b in enumerate(boxes):
            mask |= masks[i, best[i]].numpy().astype(bool)
            inside[int(math.floor(b.y1)):int(math.ceil(b.y2)),
                   int(math.floor(b.x1)):int(math.ceil(b.x2))] = True
        return (mask & inside).astype(np.uint8)


CONVERTERS: dict[str, Callable[..., CueConverter]] = {
    "blob": BlobConverter,
    "grounding-dino": GroundingDinoConverter,
}
MASKERS: dict[str, Callable[..., MaskGenerator]] = {
    "region": RegionMaskGenerator,
    "sam": SamMaskGenerator,
}


def load_converter(name: str, **kwargs) -> CueConverter:
    if name not in CONVERTERS:
        raise ConfigError(f"unknown converter {name!r}; available: {sorted(CONVERTERS)}")
    return CONVERTERS[name](**kwargs)


def load_masker(name: str, **kwargs) -> MaskGenerator:
    if name not in MASKERS:
        raise ConfigError(f"unknown masker {name!r}; available: {sorted(MASKERS)}")
    return MASKERS[name](**kwargs)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class PseudoLabelRun:
    masks: list[Optional[np.ndarray]]
    provenance: list[dict[str, Any]] = field(default_factory=list)

    @property
    def failures(self) -> int:
        return sum(1 for rec in self.provenance if rec.get("failure"))

    def write_provenance(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.provenance:
                fh.write(json.dumps(rec) + "\n")


def generate_pseudo_masks(dataset: Sequence[tuple], converter: CueConverter,
                          masker: MaskGenerator,
                          threshold: float = DEFAULT_SCORE_THRESHOLD,
                          ids: Optional[Sequence[str]] = None) -> PseudoLabelRun:
    """Run converter -> :func:`filter_boxes` -> masker over ``(image, text)`` pairs.

    A failing item gets ``None`` as its mask and a ``failure`` entry in its
    provenance record; the remaining items are still processed. Items with
    no surviving box get an all-zero mask.
    """
    if not dataset:
        raise ValueError("dataset must not be empty")
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"score threshold must lie in [0, 1], got {threshold}")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(dataset))]
    masker_name = getattr(masker, "name", type(masker).__name__)
    run = PseudoLabelRun(masks=[])
    for image_id, (image, text) in zip(ids, dataset):
        rec: dict[str, Any] = {"image_id": image_id, "boxes_raw": [], "boxes_kept": [],
                               "threshold": threshold, "masker_name": masker_name,
                               "failure": None, "warnings": []}
        try:
            h, w = image.shape[:2]
            raw = [b.clamp(w, h) for b in converter(image, text)]
            kept = filter_boxes(raw, threshold)
            rec["boxes_raw"] = [b.to_dict() for b in raw]
            rec["boxes_kept"] = [b.to_dict() for b in kept]
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", DegenerateBoxWarning)
                mask = np.asarray(masker(image, kept))
            rec["warnings"] = [str(c.message) for c in caught]
            if mask.shape != (h, w) or not np.isin(mask, (0, 1)).all():
                raise ValueError(f"masker returned a non-binary or mis-sized mask {mask.shape}")
            run.masks.append(mask.astype(np.uint8))
        except Exception as exc:  # per-item isolation
            rec["failure"] = f"{type(exc).__name__}: {exc}"
            run.masks.append(None)
        run.provenance.append(rec)
    return run


# ---------------------------------------------------------------------------
# box average precision
# ---------------------------------------------------------------------------

def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def average_precision(items: Sequence[tuple[Sequence[ScoredBox], Sequence[Sequence[float]]]],
                      iou_threshold: float = 0.5) -> float:
    """Single-class AP pooled over images.

    Predictions are ranked by score across all images and greedily matched,
    within their own image, to the unmatched ground-truth box of highest IoU
    (at least ``iou_threshold``). The precision-recall curve is sampled at
    every distinct score cutoff and integrated with the usual
    monotone-precision envelope.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ConfigError("iou_threshold must lie in (0, 1)")
    n_gt = sum(len(g) for _, g in items)
    n_pred = sum(len(p) for p, _ in items)
    if n_gt == 0:
        return 1.0 if n_pred == 0 else 0.0
    if n_pred == 0:
        return 0.0

    ranked = sorted(((b.score, img, b) for img, (preds, _) in enumerate(items) for b in preds),
                    key=lambda t: -t[0])
    matched = [np.zeros(len(g), dtype=bool) for _, g in items]
    hits = []
    for _, img, box in ranked:
        gts = items[img][1]
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(gts):
            if matched[img][j]:
                continue
            o = box_iou(box.xyxy(), g)
            if o >= best_iou:
                best, best_iou = j, o
        if best >= 0:
            matched[img][best] = True
        hits.append(best >= 0)

    scores = np.array([s for s, _, _ in ranked])
    tp = np.cumsum(hits)
    # PR points only at the last prediction of each tied-score group
    last = np.r_[scores[1:] != scores[:-1], True]
    tp = tp[last]
    n = np.flatnonzero(last) + 1
    recall = tp / n_gt
    precision = tp / n
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * envelope))


def box_map_score(pred_boxes: Sequence[ScoredBox], gt_boxes: Sequence[Sequence[float]],
                  iou_threshold: float = 0.5) -> float:
    """Average precision of one image's predictions."""
    return average_precision([(pred_boxes, gt_boxes)], iou_threshold)
