"""``terraseg`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import COMMANDS, ConfigError, RunConfig, parse_config

log = logging.getLogger("terraseg")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# dataset discovery
# ---------------------------------------------------------------------------

def _field_dirs(root: Path) -> list[Path]:
    if (root / "mask.png").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "mask.png").exists())
    if not dirs:
        raise CommandError(f"no field directories (containing mask.png) under {root}")
    return dirs


def _sample_dirs(root: Path, split: str | None) -> list[Path]:
    """Samples of ``split`` from an augmented dataset, or every field directory otherwise.

    ``split`` of None or "all" takes everything.
    """
    from .data.splits import manifest_path, read_manifest

    mp = manifest_path(root)
    if not mp.exists():
        return _field_dirs(root)
    rows = read_manifest(mp)
    return [root / "samples" / r.sample_id for r in rows if split in (None, "all") or r.split == split]


def _resize_pair(x: np.ndarray, mask: np.ndarray, size: int):
    from .data.augment import resize_bilinear, resize_nearest

    if x.shape[-1] == size and x.shape[-2] == size:
        return x, mask
    return resize_bilinear(x, (size, size)), resize_nearest(mask, (size, size))


def load_dataset(root: Path, split: str | None, size: int, model_input: int = 512):
    """Stack samples for training: center crop to ``model_input`` when larger, then resize to ``size``."""
    from .data.augment import to_model_input
    from .data.fields import load_field
    from .training import Dataset

    xs, ys, ids = [], [], []
    for d in _sample_dirs(root, split):
        stack = load_field(d)
        x, m = stack.channels(), stack.mask
        if min(m.shape) > model_input:
            x, m = to_model_input(x, m, model_input)
        x, m = _resize_pair(x, m, size)
        xs.append(x.astype(np.float32))
        ys.append(m.astype(np.float32))
        ids.append(d.name)
    if not xs:
        return Dataset(np.zeros((0, 15, size, size), np.float32), np.zeros((0, size, size), np.float32), [])
    return Dataset(np.stack(xs), np.stack(ys), ids)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _need(value, what: str) -> Path:
    if not value:
        raise CommandError(f"missing {what}")
    p = Path(value)
    if not p.exists():
        raise CommandError(f"{what} {p} does not exist")
    return p


def cmd_synth(cfg: RunConfig, out: Path) -> None:
    from .data.fields import imbalance_stats, save_field
    from .data.synth import synth_field

    s = cfg.sections["synth"]
    masks = []
    for i in range(s["n_fields"]):
        stack = synth_field(s["height"], s["width"], seed=cfg.seed * 1000 + i, n_sites=s["n_sites"] or None,
                            target_ratio=s["target_ratio"], field_id=f"field_{i:03d}")
        save_field(stack, out / stack.field_id)
        masks.append(stack.mask)
    stats = imbalance_stats(masks)
    row = stats.row()
    lines = [",".join(row), ",".join(f"{v:.6f}" for v in row.values())]
    (out / "imbalance.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_augment(cfg: RunConfig, data: Path, out: Path) -> None:
    from .data.augment import augment
    from .data.fields import load_field, save_field, stack_from_channels
    from .data.splits import ManifestRow, assign_fields, manifest_path, write_manifest

    spec = cfg.augment_spec()
    a = cfg.sections["augment"]
    fields = _field_dirs(data)
    val, test = a["val_fraction"], a["test_fraction"]
    mapping = assign_fields([d.name for d in fields], (1 - val - test, val, test), cfg.seed)
    rows = []
    for d in fields:
        stack = load_field(d)
        for k, s in enumerate(augment(stack, spec)):
            sid = f"{stack.field_id}_{k:03d}"
            save_field(stack_from_channels(s.x, s.mask, sid), out / "samples" / sid)
            rows.append(ManifestRow(sid, stack.field_id, mapping[stack.field_id], s.augmentation))
    write_manifest(manifest_path(out), rows)


def _build(cfg: RunConfig):
    from .model import build_model

    return build_model(cfg.sections["run"]["preset"], seed=cfg.seed)


def cmd_train(cfg: RunConfig, data: Path, out: Path) -> None:
    from .metrics import evaluate_probabilities, report_csv
    from .report import plot_loss, plot_metrics
    from .training import train

    model = _build(cfg)
    size = model.config.input_size
    tcfg = cfg.train_config()
    train_set = load_dataset(data, "train", size)
    val_set = load_dataset(data, "val", size)
    if len(train_set) == 0:
        raise CommandError(f"no training samples under {data}")
    metrics = {}

    def score(epoch, path):
        for split, ds in (("train", train_set), ("val", val_set)):
            if len(ds):
                probs = _predict_batches(model, ds.x, tcfg.batch_size)
                metrics[(split, epoch)] = evaluate_probabilities(probs, ds.y, cfg.threshold)
        report_csv(metrics, out / "metrics.csv")

    result = train(model, train_set, tcfg, val_set=val_set, out_dir=out, on_checkpoint=score)
    plot_loss(result.history, out / "loss.png")
    if metrics:
        plot_metrics(out / "metrics.csv", out / "metrics.png")


def _predict_batches(model, x: np.ndarray, batch: int) -> np.ndarray:
    return np.concatenate([model.predict_proba(x[i:i + batch]) for i in range(0, len(x), batch)])


def _read_prediction(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64)
    return arr


def cmd_eval(cfg: RunConfig, data: Path, out: Path) -> None:
    from .metrics import evaluate_masks, evaluate_probabilities, report_csv, threshold_scaled
    from .report import plot_metrics
    from .training import checkpoint_name, load_checkpoint, select_best

    e = cfg.sections["eval"]
    split = e["split"]
    reports = {}
    if e["predictions"]:
        # Oracle mode: grayscale PNGs named <sample_id>.png on the 0-255 scale.
        pred_dir = _need(e["predictions"], "predictions directory")
        dirs = _sample_dirs(data, split)
        from .data.fields import load_field

        preds, gts = [], []
        for d in dirs:
            p = pred_dir / f"{d.name}.png"
            if not p.exists():
                raise CommandError(f"missing prediction {p.name} in {pred_dir}")
            preds.append(threshold_scaled(_read_prediction(p), cfg.threshold))
            gts.append(load_field(d).mask)
        reports[(split, 0)] = evaluate_masks(preds, gts)
    else:
        ckpt = _need(e["checkpoint"], "checkpoint")
        model = _build(cfg)
        ds = load_dataset(data, split, model.config.input_size)
        if len(ds) == 0:
            raise CommandError(f"no samples in split {split!r} under {data}")
        paths = sorted(ckpt.glob("epoch_*.sseg")) if ckpt.is_dir() else [ckpt]
        if not paths:
            raise CommandError(f"no checkpoints in {ckpt}")
        series = []
        for p in paths:
            epoch = load_checkpoint(p, model)
            probs = _predict_batches(model, ds.x, cfg.train_config().batch_size)
            reports[(split, epoch)] = evaluate_probabilities(probs, ds.y, cfg.threshold)
            series.append((epoch, reports[(split, epoch)].MIoU, p))
        best = select_best(series)
        (out / "best.txt").write_text(f"{checkpoint_name(best[0])},{best[1]:.6f}\n", encoding="utf-8")
    report_csv(reports, out / "metrics.csv")
    plot_metrics(out / "metrics.csv", out / "metrics.png")


def cmd_predict(cfg: RunConfig, data: Path, out: Path) -> None:
    from .data.augment import resize_bilinear
    from .data.fields import load_field
    from .metrics import save_mask_png, threshold_mask
    from .report import save_overlay
    from .training import load_checkpoint

    ckpt = _need(cfg.sections["eval"]["checkpoint"], "checkpoint")
    model = _build(cfg)
    load_checkpoint(ckpt, model)
    size = model.config.input_size
    for d in _field_dirs(data):
        stack = load_field(d)
        H, W = stack.shape
        x = resize_bilinear(stack.channels(), (size, size))
        prob = model.predict_proba(x[None])[0]
        prob = np.clip(resize_bilinear(prob.astype(np.float64), (H, W)), 0, 1)
        target = out / stack.field_id
        target.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.rint(prob * 255).astype(np.uint8), mode="L").save(target / "probability.png")
        mask = threshold_mask(prob, cfg.threshold)
        save_mask_png(mask, target / "mask.png")
        save_overlay(stack.attributes["ndvi"], mask, target / "overlay.png")


def cmd_baseline_grid(cfg: RunConfig, data: Path, out: Path) -> None:
    from dataclasses import replace

    from .baseline import ExperimentGrid, UnetConfig, run_grid

    b = cfg.sections["baseline"]
    prior = b["head_prior"] if b["head_prior"] > 0 else None
    tcfg = replace(cfg.train_config(), batch_size=b["batch_size"], checkpoint_every=b["checkpoint_every"])
    grid = ExperimentGrid(UnetConfig(tuple(b["widths"]), 15, b["batch_size"], prior), tcfg, seed=cfg.seed,
                          threshold=cfg.threshold)
    train_set = load_dataset(data, "train", b["input_size"])
    val_set = load_dataset(data, "val", b["input_size"])
    results = run_grid(grid, train_set, out, {"val": val_set})
    failed = [r for r in results if r.error]
    if failed:
        raise CommandError("; ".join(f"{r.cell.name}: {r.error}" for r in failed))


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="terraseg", description="Soil-sampling site segmentation.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=("paper", "tiny", "micro"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", help="dataset root")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint", help="checkpoint file or directory (eval, predict)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict:
    ov = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = v.strip()
    flags = {"run.seed": args.seed, "run.preset": args.preset, "run.threshold": args.threshold,
             "run.out": args.out, "run.data": args.data, "train.lr": args.lr,
             "train.epochs": args.epochs, "eval.checkpoint": args.checkpoint}
    ov.update({k: v for k, v in flags.items() if v is not None})
    return ov


def dispatch(cfg: RunConfig) -> None:
    out = Path(cfg.sections["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.freeze(out)
    data = cfg.sections["run"]["data"]
    if cfg.command == "synth":
        cmd_synth(cfg, out)
        return
    data = _need(data, "dataset root (--data)")
    {"augment": cmd_augment, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
     "baseline-grid": cmd_baseline_grid}[cfg.command](cfg, data, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, _overrides(args), command=args.command)
        dispatch(cfg)
    except Exception as exc:
        kind = "config" if isinstance(exc, ConfigError) else type(exc).__name__
        print(json.dumps({"status": "error", "command": args.command, "kind": kind, "message": str(exc)}),
              file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
