"""Training, evaluation, checkpoints and the ablation grid."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from torch import Tensor
from torch.utils.data import DataLoader, TensorDataset

from .dataio import SegSample, resize_pair
from .errors import ConfigError, DataError, NumericFailure, ShapeError
from .metrics import MetricReport, evaluate
from .model import (ABLATIONS, ModelConfig, TextGuidedSegmenter, build_model,
                    count_parameters, images_to_tensor, predict_mask)
from .text import batch_token_ids

log = logging.getLogger(__name__)

LossKind = Literal["bce_dice", "bce", "dice"]
SchedulerKind = Literal["reduce_on_plateau", "linear_multistep"]
CHECKPOINT_FORMAT = "cueseg-checkpoint"
CHECKPOINT_VERSION = 1

# full-scale polyp results (mIoU %, mDice %) published for the four variants;
# used only as a qualitative reference next to desk-scale grid results
PUBLISHED_POLYP = {
    "no_tvha": (74.92, 83.15),
    "no_cma": (80.83, 87.22),
    "no_ca": (80.64, 86.87),
    "full": (82.47, 88.24),
}


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 200
    scheduler: SchedulerKind = "reduce_on_plateau"
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    early_stop_patience: Optional[int] = 20
    warmup_epochs: int = 5
    milestones: tuple[int, ...] = (80, 120)
    loss: LossKind = "bce_dice"
    seed: int = 0
    freeze_text: bool = True
    mask_threshold: float = 0.5
    stop_at_mdice: Optional[float] = None

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be >= 1")
        if self.scheduler not in ("reduce_on_plateau", "linear_multistep"):
            raise ConfigError(f"unknown scheduler {self.scheduler!r}")
        if self.loss not in ("bce_dice", "bce", "dice"):
            raise ConfigError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> tuple[ModelConfig, TrainConfig, dict]:
    """Read a YAML/JSON config with ``model``, ``train`` and optional ``data`` sections."""
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    unknown = set(raw) - {"model", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return (ModelConfig.from_dict(raw.get("model") or {}),
            TrainConfig.from_dict(raw.get("train") or {}),
            raw.get("data") or {})


def config_digest(model_cfg: ModelConfig, train_cfg: TrainConfig | None = None) -> str:
    payload = {"model": model_cfg.to_dict(),
               "train": train_cfg.to_dict() if train_cfg else None}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def soft_dice_loss(logits: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    p = torch.sigmoid(logits).flatten(1)
    t = target.flatten(1)
    score = (2 * (p * t).sum(1) + smooth) / (p.sum(1) + t.sum(1) + smooth)
    return (1 - score).mean()


def segmentation_loss(logits: Tensor, target: Tensor, kind: LossKind = "bce_dice") -> Tensor:
    """BCE on logits, soft Dice, or their unweighted sum (default)."""
    if logits.shape != target.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    target = target.to(logits.dtype)
    if logits.dim() < 2:
        logits, target = logits[None], target[None]
    if kind == "bce":
        return F.binary_cross_entropy_with_logits(logits, target)
    if kind == "dice":
        return soft_dice_loss(logits, target)
    if kind == "bce_dice":
        return F.binary_cross_entropy_with_logits(logits, target) + soft_dice_loss(logits, target)
    raise ConfigError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    ids: list[str]
    images: Tensor  # (N, 3, H, W)
    token_ids: Tensor  # (N, L)
    masks: Optional[Tensor]  # (N, 1, H, W) float, or None

    def __len__(self):
        return len(self.ids)


def prepare(samples: Sequence[SegSample], model_cfg: ModelConfig) -> PreparedData:
    """Resize to the model's input size and tokenize."""
    if not samples:
        raise DataError("no samples to prepare")
    images, masks = [], []
    has_masks = all(s.mask is not None for s in samples)
    for s in samples:
        img, m = resize_pair(s.image, s.mask if has_masks else None, model_cfg.image_size)
        images.append(img)
        masks.append(m)
    tokens = batch_token_ids([s.text for s in samples], model_cfg.text_vocab_size,
                             model_cfg.text_max_len)
    mask_t = None
    if has_masks:
        mask_t = torch.from_numpy(np.stack(masks).astype(np.float32))[:, None]
    return PreparedData([s.id for s in samples], images_to_tensor(images), tokens, mask_t)


@torch.no_grad()
def predict_logits(model: TextGuidedSegmenter, data: PreparedData, batch_size: int = 8) -> Tensor:
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    outs = []
    for i in range(0, len(data), batch_size):
        outs.append(model(data.images[i:i + batch_size].to(dtype),
                          data.token_ids[i:i + batch_size]))
    model.train(was_training)
    return torch.cat(outs)


def evaluate_model(model: TextGuidedSegmenter, data: PreparedData, threshold: float = 0.5,
                   batch_size: int = 8) -> MetricReport:
    if data.masks is None:
        raise DataError("evaluation needs ground-truth masks")
    preds = predict_mask(predict_logits(model, data, batch_size), threshold)
    gts = data.masks.numpy().astype(np.uint8)
    return evaluate((preds[i, 0], gts[i, 0], data.ids[i]) for i in range(len(data)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: TextGuidedSegmenter
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_mdice: float = -1.0
    optimizer: Optional[torch.optim.Optimizer] = None

    def history_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, ["epoch", "loss", "miou", "mdice", "lr"],
                                lineterminator="\n")
        writer.writeheader()
        for row in self.history:
            writer.writerow({k: row[k] for k in writer.fieldnames})
        return buf.getvalue()


def _make_scheduler(opt, cfg: TrainConfig):
    if cfg.scheduler == "reduce_on_plateau":
        # torch cuts the lr once more than `patience` epochs fail to improve;
        # we want the cut right after `plateau_patience` such epochs
        return torch.optim.lr_scheduler.ReduceLROnPlateau(
            opt, mode="max", factor=cfg.plateau_factor, patience=cfg.plateau_patience - 1)
    warm = torch.optim.lr_scheduler.LinearLR(opt, start_factor=0.1,
                                             total_iters=max(cfg.warmup_epochs, 1))
    steps = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.milestones), gamma=0.1)
    return torch.optim.lr_scheduler.ChainedScheduler([warm, steps])


def train(model: TextGuidedSegmenter, train_data: PreparedData, val_data: PreparedData,
          cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Optimise with Adam; keep and restore the best-validation-mDice weights.

    The plateau scheduler watches validation mDice. When ``out_dir`` is
    given, ``best.ckpt`` and ``history.csv`` are written there.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ConfigError("training and validation splits must be non-empty")
    if train_data.masks is None:
        raise DataError("training data has no masks")
    torch.manual_seed(cfg.seed)
    model.freeze_text(cfg.freeze_text)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = _make_scheduler(opt, cfg)
    dtype = next(model.parameters()).dtype
    loader = DataLoader(TensorDataset(train_data.images, train_data.token_ids, train_data.masks),
                        batch_size=cfg.batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(cfg.seed))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    result = TrainResult(model=model, optimizer=opt)
    best_state = None
    since_best = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = opt.param_groups[0]["lr"]
        model.train()
        total, seen = 0.0, 0
        for b, (x, ids, y) in enumerate(loader):
            logits = model(x.to(dtype), ids)
            loss = segmentation_loss(logits, y.to(dtype), cfg.loss)
            if not torch.isfinite(loss):
                raise NumericFailure(f"non-finite loss {loss.item()} at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(x)
            seen += len(x)
        report = evaluate_model(model, val_data, cfg.mask_threshold, cfg.batch_size)
        row = {"epoch": epoch, "loss": total / seen, "miou": report.miou,
               "mdice": report.mdice, "lr": lr}
        result.history.append(row)
        log.info("epoch %d loss %.5f val mIoU %.4f mDice %.4f lr %.2e",
                 epoch, row["loss"], report.miou, report.mdice, lr)

        if cfg.scheduler == "reduce_on_plateau":
            sched.step(report.mdice)
        else:
            sched.step()

        if report.mdice > result.best_mdice:
            result.best_mdice = report.mdice
            result.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            since_best = 0
            if out is not None:
                save_checkpoint(out / "best.ckpt", model, opt, epoch, cfg,
                                {"miou": report.miou, "mdice": report.mdice})
        else:
            since_best += 1
        if cfg.stop_at_mdice is not None and report.mdice >= cfg.stop_at_mdice:
            break
        if cfg.early_stop_patience and since_best >= cfg.early_stop_patience:
            log.info("early stop at epoch %d", epoch)
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    if out is not None:
        (out / "history.csv").write_text(result.history_csv(), encoding="utf-8")
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer_state: Optional[dict]
    epoch: int
    config_digest: str
    train_config: Optional[dict]
    metrics: dict

    def build_model(self) -> TextGuidedSegmenter:
        model = TextGuidedSegmenter(self.model_config)
        dtype = next(iter(self.params.values())).dtype if self.params else np.float32
        if dtype == np.float64:
            model.double()
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.params.items()})
        if self.train_config is not None:
            model.freeze_text(self.train_config.get("freeze_text", False))
        model.eval()
        return model


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, model: TextGuidedSegmenter, optimizer=None, epoch: int = 0,
                    train_cfg: TrainConfig | None = None, metrics: dict | None = None) -> None:
    """Zip container: ``manifest.json`` plus one ``.npy`` per tensor."""
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "config_digest": config_digest(model.cfg, train_cfg),
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "metrics": metrics or {},
        "params": {},
        "optimizer": None,
    }
    files = {}
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        fname = f"params/{name}.npy"
        manifest["params"][name] = {"shape": list(arr.shape), "dtype": str(arr.dtype),
                                    "file": fname}
        files[fname] = _npy_bytes(arr)
    if optimizer is not None:
        sd = optimizer.state_dict()
        state_index = {}
        for idx, st in sd["state"].items():
            entry = {}
            for key, val in st.items():
                if torch.is_tensor(val):
                    fname = f"optimizer/{idx}/{key}.npy"
                    files[fname] = _npy_bytes(val.detach().cpu().numpy())
                    entry[key] = {"file": fname}
                else:
                    entry[key] = {"value": val}
            state_index[str(idx)] = entry
        manifest["optimizer"] = {"param_groups": sd["param_groups"], "state": state_index}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for fname, data in files.items():
            zf.writestr(fname, data)


def load_checkpoint(path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise DataError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} file")

        def read(fname):
            return np.lib.format.read_array(io.BytesIO(zf.read(fname)), allow_pickle=False)

        params = {name: read(meta["file"]) for name, meta in manifest["params"].items()}
        opt_state = None
        if manifest.get("optimizer"):
            state = {}
            for idx, entry in manifest["optimizer"]["state"].items():
                state[int(idx)] = {k: (torch.from_numpy(read(v["file"])) if "file" in v
                                       else v["value"]) for k, v in entry.items()}
            opt_state = {"state": state, "param_groups": manifest["optimizer"]["param_groups"]}
    return Checkpoint(ModelConfig.from_dict(manifest["model_config"]), params, opt_state,
                      manifest["epoch"], manifest["config_digest"],
                      manifest.get("train_config"), manifest.get("metrics", {}))


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    variant: str
    params: int = 0
    miou: float = float("nan")
    mdice: float = float("nan")
    epochs: int = 0
    seconds: float = 0.0
    status: str = "ok"
    error: str = ""


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def row(self, variant: str) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)

    def ranking(self) -> list[str]:
        ok = [r for r in self.rows if r.status == "ok"]
        return [r.variant for r in sorted(ok, key=lambda r: -r.mdice)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = [f.name for f in dataclasses.fields(AblationRow)]
        writer = csv.DictWriter(buf, fields, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow(dataclasses.asdict(r))
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [
            "| variant | params | mIoU (%) | mDice (%) | epochs | status "
            "| published mIoU (%) | published mDice (%) |",
            "|---|---:|---:|---:|---:|---|---:|---:|",
        ]
        for r in self.rows:
            pub = PUBLISHED_POLYP.get(r.variant, (float("nan"), float("nan")))
            lines.append(f"| {r.variant} | {r.params} | {100 * r.miou:.2f} | "
                         f"{100 * r.mdice:.2f} | {r.epochs} | {r.status} | "
                         f"{pub[0]:.2f} | {pub[1]:.2f} |")
        lines.append("")
        lines.append("ranking by desk-scale mDice: " + " > ".join(self.ranking()))
        if all(v in {r.variant for r in self.rows if r.status == "ok"}
               for v in ("full", "no_tvha")):
            full, base = self.row("full"), self.row("no_tvha")
            lines.append(
                f"full minus no_tvha: {100 * (full.mdice - base.mdice):+.2f} mDice, "
                f"{100 * (full.miou - base.miou):+.2f} mIoU at desk scale; published "
                f"polyp reference {PUBLISHED_POLYP['full'][1] - PUBLISHED_POLYP['no_tvha'][1]:+.2f}"
                f" mDice, {PUBLISHED_POLYP['full'][0] - PUBLISHED_POLYP['no_tvha'][0]:+.2f} mIoU")
        return "\n".join(lines) + "\n"


def run_ablation_grid(model_cfg: ModelConfig, train_cfg: TrainConfig,
                      train_data: PreparedData, val_data: PreparedData,
                      eval_data: PreparedData | None = None,
                      variants: Sequence[str] = ABLATIONS, out_dir=None) -> AblationReport:
    """Train every variant under the same seed and budget; failures become rows."""
    eval_data = eval_data if eval_data is not None else val_data
    rows = []
    for variant in variants:
        row = AblationRow(variant)
        start = time.perf_counter()
        try:
            cfg = dataclasses.replace(model_cfg, ablation=variant)
            model = build_model(cfg, seed=train_cfg.seed)
            row.params = count_parameters(model)
            sub = Path(out_dir) / variant if out_dir is not None else None
            result = train(model, train_data, val_data, train_cfg, sub)
            report = evaluate_model(result.model, eval_data, train_cfg.mask_threshold)
            row.miou, row.mdice, row.epochs = report.miou, report.mdice, len(result.history)
        except Exception as exc:  # a failed variant must not stop the grid
            log.exception("variant %s failed", variant)
            row.status, row.error = "failed", f"{type(exc).__name__}: {exc}"
        row.seconds = time.perf_counter() - start
        rows.append(row)
    return AblationReport(rows)
