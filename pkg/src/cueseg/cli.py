"""Command-line entry point: ``cueseg <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. Relative output paths are resolved under
``$CUESEG_OUTPUT_ROOT`` when that variable is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CuesegError, DataError

log = logging.getLogger("cueseg")

OUTPUT_ROOT_ENV = "CUESEG_OUTPUT_ROOT"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class UsageError(CuesegError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def output_path(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _existing(path: str, kind: str = "path") -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{kind} {path} does not exist")
    return p


def _image_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no images found in {directory}")
    return files


def _read_text_file(path: Path) -> dict[str, str]:
    """``id<TAB>text`` per line."""
    texts = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise DataError(f"{path} line {n}: expected 'id<TAB>text'")
        ident, text = line.split("\t", 1)
        texts[ident.strip()] = text.strip()
    return texts


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .dataio import write_corpus
    from .synthetic import make_synthetic_corpus

    corpus = make_synthetic_corpus(args.n, seed=args.seed, size=args.size,
                                   granularity=args.granularity, max_blobs=args.max_blobs)
    out = output_path(args.out)
    write_corpus(out, corpus)
    print(f"wrote {len(corpus)} samples to {out}")
    return 0


def cmd_pseudo_label(args) -> int:
    from .dataio import load_image, load_mask, save_mask
    from .metrics import evaluate
    from .pseudo_label import generate_pseudo_masks, load_converter, load_masker

    files = _image_files(_existing(args.images, "image directory"))
    ids = [f.stem for f in files]
    if args.text_file:
        texts = _read_text_file(_existing(args.text_file, "text file"))
        missing = [i for i in ids if i not in texts]
        if missing:
            raise DataError(f"no text for ids {missing[:5]}{'...' if len(missing) > 5 else ''}")
        prompts = [texts[i] for i in ids]
    else:
        prompts = [args.text] * len(ids)
    converter = load_converter(args.converter)
    masker = load_masker(args.masker)
    dataset = [(load_image(f), t) for f, t in zip(files, prompts)]
    run = generate_pseudo_masks(dataset, converter, masker, args.threshold, ids)

    out = output_path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for ident, mask in zip(ids, run.masks):
        if mask is not None:
            save_mask(out / "masks" / f"{ident}.png", mask)
    run.write_provenance(out / "provenance.jsonl")
    print(f"pseudo-labelled {len(ids)} images, {run.failures} failures "
          f"(converter={converter.name}, masker={masker.name}, threshold={args.threshold})")
    if args.gt:
        gt_dir = _existing(args.gt, "ground-truth directory")
        pairs = [(m, load_mask(gt_dir / f"{i}.png"), i)
                 for i, m in zip(ids, run.masks) if m is not None]
        if pairs:
            print(f"pseudo-mask quality: {evaluate(pairs).summary()}")
    return 0


def _convert_bbox(bbox, box_format: str):
    if box_format == "xywh" and isinstance(bbox, list) and len(bbox) == 4:
        x, y, w, h = bbox
        return [x, y, x + w, y + h]
    return bbox


def cmd_convert_odvg(args) -> int:
    from .dataio import record_from_dict, write_grounding_file
    from .errors import ParseError

    src = _existing(args.inp, "input file")
    records = []
    with open(src, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON: {exc.msg}", n) from exc
            if isinstance(obj, dict) and isinstance(obj.get("grounding"), dict):
                for reg in obj["grounding"].get("regions") or []:
                    if isinstance(reg, dict) and "bbox" in reg:
                        reg["bbox"] = _convert_bbox(reg["bbox"], args.box_format)
            records.append(record_from_dict(obj, n))
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_grounding_file(out, records)
    print(f"wrote {len(records)} canonical records to {out}")
    return 0


def cmd_split(args) -> int:
    from .dataio import SplitSpec, read_id_list, split_dataset, write_split_manifests

    ids = read_id_list(_existing(args.ids, "id file"))
    parts = split_dataset(ids, SplitSpec.parse(args.ratios, seed=args.seed))
    out = output_path(args.out)
    write_split_manifests(out, parts)
    print("split sizes train/val/test: " + "/".join(str(len(p)) for p in parts))
    return 0


def _load_splits(data_dir: Path, seed: int):
    from .dataio import (RECORDS_FILE, SplitSpec, read_grounding_file, read_id_list,
                         record_id, split_dataset)

    if all((data_dir / f"{n}.txt").exists() for n in ("train", "val")):
        return [read_id_list(data_dir / f"{n}.txt") for n in ("train", "val")]
    ids = [record_id(r) for r in read_grounding_file(_existing(str(data_dir / RECORDS_FILE)))]
    train_ids, val_ids, _ = split_dataset(ids, SplitSpec(seed=seed))
    return train_ids, val_ids


def cmd_train(args) -> int:
    from .dataio import load_samples
    from .model import build_model, count_parameters
    from .train import load_config, prepare, train

    model_cfg, train_cfg, _ = load_config(_existing(args.config, "config"))
    data_dir = _existing(args.data, "data directory")
    train_ids, val_ids = _load_splits(data_dir, train_cfg.seed)
    train_data = prepare(load_samples(data_dir, train_ids, args.mask_dir), model_cfg)
    val_data = prepare(load_samples(data_dir, val_ids, args.mask_dir), model_cfg)
    model = build_model(model_cfg, seed=train_cfg.seed)
    print(f"training {model_cfg.ablation} ({count_parameters(model)} params) on "
          f"{len(train_data)} images, validating on {len(val_data)}")
    out = output_path(args.out)
    result = train(model, train_data, val_data, train_cfg, out)
    print(f"best val mDice {result.best_mdice:.4f} at epoch {result.best_epoch}; "
          f"wrote {out / 'best.ckpt'} and {out / 'history.csv'}")
    return 0


def cmd_eval(args) -> int:
    from .dataio import load_mask, load_samples, read_id_list
    from .metrics import evaluate

    if args.pred:
        pred_dir = _existing(args.pred, "prediction directory")
        gt_dir = _existing(args.gt or str(Path(args.data) / args.mask_dir),
                           "ground-truth directory")
        files = sorted(p for p in pred_dir.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise DataError(f"no masks found in {pred_dir}")
        pairs = []
        for f in files:
            gt = gt_dir / f.name
            if not gt.exists():
                raise DataError(f"no ground truth for {f.name} in {gt_dir}")
            pairs.append((load_mask(f), load_mask(gt), f.stem))
        report = evaluate(pairs)
    else:
        from .train import evaluate_model, load_checkpoint, prepare

        ck = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
        data_dir = _existing(args.data, "data directory")
        ids = read_id_list(args.ids) if args.ids else None
        if ids is None and (data_dir / "test.txt").exists():
            ids = read_id_list(data_dir / "test.txt")
        data = prepare(load_samples(data_dir, ids, args.mask_dir), ck.model_config)
        report = evaluate_model(ck.build_model(), data, args.threshold)
    print(report.summary())
    if args.report:
        out = output_path(args.report)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_csv() if out.suffix == ".csv" else report.to_json(),
                       encoding="utf-8")
    return 0


def cmd_ablate(args) -> int:
    from .dataio import SegSample, SplitSpec, load_samples, split_dataset
    from .synthetic import make_synthetic_corpus
    from .train import load_config, prepare, run_ablation_grid

    model_cfg, train_cfg, data_cfg = load_config(_existing(args.config, "config"))
    if args.data:
        samples = load_samples(_existing(args.data, "data directory"))
    else:
        size = data_cfg.get("size", model_cfg.image_size[0])
        corpus = make_synthetic_corpus(int(data_cfg.get("n", 40)),
                                       seed=int(data_cfg.get("seed", 0)), size=int(size),
                                       granularity=data_cfg.get("granularity", "word"))
        samples = [SegSample(s.id, s.image, s.text, s.mask) for s in corpus]
    by_id = {s.id: s for s in samples}
    tr, va, te = split_dataset(list(by_id), SplitSpec(seed=train_cfg.seed))
    if not te:
        te = va
    prep = [prepare([by_id[i] for i in part], model_cfg) for part in (tr, va, te)]
    out = output_path(args.out)
    report = run_ablation_grid(model_cfg, train_cfg, *prep, out_dir=out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "ablation.md").write_text(report.to_markdown(), encoding="utf-8")
    print(report.to_markdown())
    return 0 if all(r.status == "ok" for r in report.rows) else 1


def cmd_overlay(args) -> int:
    from scipy import ndimage

    from .dataio import load_image, load_mask, save_image

    image = load_image(_existing(args.image, "image"))
    mask = load_mask(_existing(args.mask, "mask")).astype(bool)
    if mask.shape != image.shape[:2]:
        raise DataError(f"mask {mask.shape} and image {image.shape[:2]} differ in size")
    contour = mask & ~ndimage.binary_erosion(mask, iterations=args.width)
    out_img = image.copy()
    out_img[contour] = np.array([0.0, 1.0, 0.0])
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, out_img)
    print(f"wrote overlay to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cueseg", description="Text-cue pseudo-labelling and text-guided "
                                           "segmentation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic blob corpus")
    s.add_argument("--n", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--granularity", choices=["word", "sentence"], default="word")
    s.add_argument("--max-blobs", type=int, default=3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pseudo-label", help="turn text cues into pseudo-masks")
    s.add_argument("--images", required=True, help="directory of images")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--text", help="one text cue for every image")
    g.add_argument("--text-file", help="lines of 'id<TAB>text'")
    s.add_argument("--converter", default="blob")
    s.add_argument("--masker", default="region")
    s.add_argument("--threshold", type=float, default=0.25)
    s.add_argument("--gt", help="ground-truth mask directory; prints mIoU when given")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pseudo_label)

    s = sub.add_parser("convert-odvg", help="validate and canonicalise grounding records")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--box-format", choices=["xyxy", "xywh"], default="xyxy")
    s.set_defaults(func=cmd_convert_odvg)

    s = sub.add_parser("split", help="write train/val/test id manifests")
    s.add_argument("--ids", required=True)
    s.add_argument("--ratios", default="8:1:1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train a segmenter")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mask-dir", default="masks", help="mask directory, relative to --data unless absolute")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint or a directory of predicted masks")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--pred", help="directory of predicted masks")
    s.add_argument("--data")
    s.add_argument("--gt", help="ground-truth masks (with --pred)")
    s.add_argument("--ids", help="id list to evaluate (default: test.txt if present)")
    s.add_argument("--mask-dir", default="masks")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train all four variants and tabulate")
    s.add_argument("--config", required=True)
    s.add_argument("--data", help="dataset directory (default: synthetic corpus)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("overlay", help="draw a mask contour over its image")
    s.add_argument("--image", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--width", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_overlay)
    return p


def _validate(args) -> None:
    if args.command == "eval":
        if args.checkpoint and not args.data:
            raise UsageError("eval --checkpoint needs --data")
        if args.pred and not (args.gt or args.data):
            raise UsageError("eval --pred needs --gt or --data")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        _validate(args)
        return args.func(args)
    except CuesegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except Exception as exc:  # any other internal error still exits nonzero
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
