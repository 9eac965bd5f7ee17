"""Unet-style CNN comparison arm, focal loss, and the four-cell experiment grid.

The Unet here is a desk-scale stand-in. Its job is to exercise the grid
(grayscale/RGB input x BCE/focal loss), not to reproduce any particular
published architecture.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data.fields import grayscale_channels
from .metrics import MetricsReport, evaluate_probabilities, report_csv
from .nn import Conv2d, Module
from .tensor import ConfigurationError, Tensor, backward, no_grad, ops
from .training import EPS, Dataset, TrainConfig, bce_with_logits, load_checkpoint, train

log = logging.getLogger(__name__)

INPUT_MODES = {"gray": 5, "rgb": 15}


@dataclass(frozen=True)
class UnetConfig:
    widths: tuple[int, ...] = (16, 32, 64, 128)
    in_channels: int = 15
    batch_size: int = 32
    # Head bias starts at logit(prior) so the first predictions sit at the
    # background rate.  None keeps a zero bias.
    head_prior: float | None = 0.01

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ConfigurationError("UnetConfig needs at least two widths (one level plus bottleneck)")
        if self.in_channels not in INPUT_MODES.values():
            raise ConfigurationError(f"Unet input must have 5 or 15 channels, got {self.in_channels}")
        if self.head_prior is not None and not 0 < self.head_prior < 1:
            raise ConfigurationError("head_prior must lie in (0, 1)")

    @property
    def depth(self) -> int:
        return len(self.widths) - 1


class _DoubleConv(Module):
    def __init__(self, rng, c_in: int, c_out: int):
        self.a = Conv2d(rng, c_in, c_out, 3, padding=1)
        self.b = Conv2d(rng, c_out, c_out, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.b(ops.relu(self.a(x))))


class Unet(Module):
    def __init__(self, cfg: UnetConfig = UnetConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        w = cfg.widths
        self.down = []
        c = cfg.in_channels
        for width in w[:-1]:
            self.down.append(_DoubleConv(rng, c, width))
            c = width
        self.bottleneck = _DoubleConv(rng, c, w[-1])
        self.up = []
        c = w[-1]
        for width in reversed(w[:-1]):
            self.up.append(_DoubleConv(rng, c + width, width))
            c = width
        self.head = Conv2d(rng, c, 1, 1)
        if cfg.head_prior is not None:
            self.head.bias.data[:] = -math.log((1 - cfg.head_prior) / cfg.head_prior)

    def forward(self, x: Tensor) -> Tensor:
        """Logits ``(B, 1, H, W)``; apply a sigmoid for probabilities."""
        if x.ndim == 3:
            x = ops.reshape(x, (1, *x.shape))
        if x.shape[1] != self.config.in_channels:
            raise ConfigurationError(f"Unet expects {self.config.in_channels} channels, got {x.shape[1]}")
        H, W = x.shape[-2:]
        k = 2 ** self.config.depth
        if H % k or W % k:
            raise ConfigurationError(f"Unet input {H}x{W} must be divisible by {k}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = ops.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for block, skip in zip(self.up, reversed(skips)):
            x = ops.bilinear_resize(x, skip.shape[-2:])
            x = block(ops.concat([x, skip], axis=1))
        return self.head(x)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return ops.sigmoid(self.forward(Tensor(x))).data[:, 0]


def unet_forward(x, cfg: UnetConfig, seed: int = 0) -> np.ndarray:
    """Probability map of a freshly initialized Unet."""
    return Unet(cfg, seed).predict_proba(np.asarray(x))


# ---------------------------------------------------------------------------
# focal loss
# ---------------------------------------------------------------------------

def _check_focal(alpha: float, gamma: float) -> None:
    if not 0 < alpha < 1:
        raise ConfigurationError(f"focal loss alpha must lie in (0, 1), got {alpha}")
    if gamma < 0:
        raise ConfigurationError(f"focal loss gamma must be >= 0, got {gamma}")


def _as_target(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ConfigurationError(f"focal loss: prediction {pred.shape} vs target {target.shape}")
    return target


def focal_loss(probs: Tensor, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """mean(-alpha_t (1 - p_t)^gamma log p_t) on clamped probabilities."""
    _check_focal(alpha, gamma)
    y = _as_target(probs, target)
    m = ops.clamp(probs, EPS, 1 - EPS)
    p_t = y * m + (1 - y) * (1 - m)
    a_t = y * alpha + (1 - y) * (1 - alpha)
    terms = a_t * ops.log(p_t)
    if gamma:
        terms = terms * ops.power(1 - p_t, gamma)
    return ops.scale(ops.mean(terms), -1.0)


def focal_with_logits(logits: Tensor, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Focal loss from logits; log p_t = -softplus(-s z) with s = +1 for foreground, -1 otherwise."""
    _check_focal(alpha, gamma)
    y = _as_target(logits, target)
    sign = y * 2 - 1
    sz = sign * logits
    a_t = y * alpha + (1 - y) * (1 - alpha)
    terms = a_t * ops.softplus(-sz)
    if gamma:
        # 1 - p_t = sigmoid(-s z)
        terms = terms * ops.power(ops.sigmoid(-sz), gamma)
    return ops.mean(terms)


LOSSES = {"bce": bce_with_logits, "focal": focal_with_logits}


def foreground_gradient_share(model: Module, x: np.ndarray, y: np.ndarray, loss: str) -> float:
    """Fraction of |dL/dlogit| mass that falls on foreground pixels for one batch."""
    logits = Tensor(model(Tensor(x)).data, requires_grad=True)
    target = y[:, None].astype(logits.dtype)
    backward(LOSSES[loss](logits, target))
    g = np.abs(logits.grad)
    total = float(g.sum())
    return float(g[target > 0].sum()) / total if total > 0 else 0.0


# ---------------------------------------------------------------------------
# experiment grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridCell:
    name: str
    input_mode: str
    loss: str


CELLS = tuple(GridCell(f"{m}_{l}", m, l) for m in ("gray", "rgb") for l in ("bce", "focal"))


@dataclass
class ExperimentGrid:
    unet: UnetConfig = UnetConfig()
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=32, checkpoint_every=500))
    cells: tuple[GridCell, ...] = CELLS
    seed: int = 0
    threshold: float = 190

    def __post_init__(self):
        if len(self.cells) != 4 or {(c.input_mode, c.loss) for c in self.cells} != {
                (m, l) for m in INPUT_MODES for l in LOSSES}:
            raise ConfigurationError("the grid must hold exactly the four input-mode x loss cells")


@dataclass
class CellResult:
    cell: GridCell
    metrics: dict[tuple[str, int], MetricsReport]
    checkpoint: Path | None
    metrics_csv: Path | None
    error: str | None = None


def _mode_data(data: Dataset, mode: str) -> Dataset:
    if mode == "rgb":
        return data
    x = np.stack([grayscale_channels(s) for s in data.x])
    return Dataset(x, data.y, list(data.ids))


def run_cell(cell: GridCell, grid: ExperimentGrid, train_set: Dataset, out_dir,
             eval_sets: dict[str, Dataset] | None = None, resume: bool = True) -> CellResult:
    from .report import plot_loss, plot_metrics

    out = Path(out_dir) / cell.name
    out.mkdir(parents=True, exist_ok=True)
    tr = _mode_data(train_set, cell.input_mode)
    evals = {"train": tr}
    evals.update({k: _mode_data(v, cell.input_mode) for k, v in (eval_sets or {}).items() if len(v)})
    cfg = replace(grid.unet, in_channels=INPUT_MODES[cell.input_mode])
    model = Unet(cfg, seed=grid.seed)
    tcfg = replace(grid.train, seed=grid.seed)
    metrics: dict[tuple[str, int], MetricsReport] = {}

    def score(epoch, path):
        for split, ds in evals.items():
            probs = np.concatenate([model.predict_proba(ds.x[i:i + tcfg.batch_size])
                                    for i in range(0, len(ds), tcfg.batch_size)])
            metrics[(split, epoch)] = evaluate_probabilities(probs, ds.y, grid.threshold)
        report_csv(metrics, out / "metrics.csv")

    resume_from = None
    done = sorted(out.glob("epoch_*.sseg")) if resume else []
    if done:
        # Re-score saved checkpoints so the curve is complete, then continue from the last.
        for p in done:
            score(load_checkpoint(p, model), p)
        resume_from = done[-1]
        if load_checkpoint(resume_from, model) >= tcfg.epochs:
            plot_metrics(out / "metrics.csv", out / "metrics.png", title=cell.name)
            return CellResult(cell, metrics, resume_from, out / "metrics.csv")

    result = train(model, tr, tcfg, out_dir=out, loss_fn=LOSSES[cell.loss],
                   resume_from=resume_from, on_checkpoint=score)
    plot_loss(result.history, out / "loss.png", title=cell.name)
    plot_metrics(out / "metrics.csv", out / "metrics.png", title=cell.name)
    last = result.checkpoints[-1][1] if result.checkpoints else resume_from
    return CellResult(cell, metrics, last, out / "metrics.csv")


def run_grid(grid: ExperimentGrid, train_set: Dataset, out_dir,
             eval_sets: dict[str, Dataset] | None = None) -> list[CellResult]:
    """Train every cell from the same seed and data; one cell failing does not stop the others."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for cell in grid.cells:
        try:
            results.append(run_cell(cell, grid, train_set, out_dir, eval_sets))
        except Exception as exc:  # isolate per-cell failures
            log.error("cell %s failed: %s", cell.name, exc)
            results.append(CellResult(cell, {}, None, None, f"{type(exc).__name__}: {exc}"))
    write_grid_manifest(out_dir / "grid.csv", results, out_dir)
    return results


def write_grid_manifest(path, results: list[CellResult], root=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "input_mode", "loss", "checkpoint_path"])
        for r in results:
            ckpt = ""
            if r.checkpoint is not None:
                ckpt = str(Path(r.checkpoint).relative_to(root)) if root is not None else str(r.checkpoint)
            w.writerow([r.cell.name, r.cell.input_mode, r.cell.loss, ckpt])
