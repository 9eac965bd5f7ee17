"""Loss, SGD with momentum and weight decay, and the epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .nn import Module
from .tensor import DimensionError, Tensor, backward, no_grad, ops

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass
class TrainConfig:
    batch_size: int = 4
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 1
    checkpoint_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.epochs < 0 or self.checkpoint_every < 1:
            raise ValueError("epochs must be >= 0 and checkpoint_every >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_pair(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"loss: prediction {pred.shape} vs target {target.shape}")
    return target


def bce_loss(probs: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of probabilities, clamped to [eps, 1 - eps]."""
    target = _check_pair(probs, target)
    m = ops.clamp(probs, EPS, 1 - EPS)
    terms = target * ops.log(m) + (1 - target) * ops.log(1 - m)
    return ops.scale(ops.mean(terms), -1.0)


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Same loss evaluated from logits: mean(softplus(z) - y z)."""
    target = _check_pair(logits, target)
    return ops.mean(ops.softplus(logits) - target * logits)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def sgd_step(named_params: Sequence[tuple[str, Tensor]], state: OptimState, cfg: TrainConfig) -> None:
    """One update in the order: decay, momentum, step.

    g <- g + lambda * theta;  b <- g on the first step, else mu * b + g;
    theta <- theta - gamma * b.
    """
    for name, p in named_params:
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter {name} has no gradient")
    state.step += 1
    for name, p in named_params:
        g = p.grad
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        if state.step > 1 and name in state.buffers:
            b = state.buffers[name]
            b *= cfg.momentum
            b += g
        else:
            b = np.array(g, dtype=p.dtype, copy=True)
            state.buffers[name] = b
        p.data -= p.dtype.type(cfg.lr) * b


def iterations_per_epoch(T: int, B: int) -> int:
    if T < 1 or B < 1:
        raise ValueError("need T >= 1 and B >= 1")
    return math.ceil(T / B)


def batch_slices(T: int, B: int) -> list[slice]:
    return [slice(i * B, min(T, (i + 1) * B)) for i in range(iterations_per_epoch(T, B))]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: Module, state: OptimState | None, epoch: int) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if state is not None:
        tensors["optim.step"] = np.array([state.step], dtype=np.float32)
        for k, v in state.buffers.items():
            tensors[f"optim.buf.{k}"] = v
    tensors["meta.epoch"] = np.array([epoch], dtype=np.float32)
    ckpt.save(path, tensors)


def load_checkpoint(path, model: Module, state: OptimState | None = None) -> int:
    """Restore ``model`` (and ``state``) in place; returns the saved epoch."""
    tensors = ckpt.load(path)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    if state is not None:
        state.step = int(tensors.get("optim.step", np.zeros(1))[0])
        state.buffers = {k[10:]: v.copy() for k, v in tensors.items() if k.startswith("optim.buf.")}
    return int(tensors["meta.epoch"][0])


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:05d}.sseg"


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Stacked samples: ``x`` is (T, C, H, W), ``y`` is (T, H, W) in {0, 1}."""

    x: np.ndarray
    y: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DimensionError(f"{len(self.x)} inputs vs {len(self.y)} masks")
        if not self.ids:
            self.ids = [f"s{i:05d}" for i in range(len(self.x))]

    def __len__(self) -> int:
        return len(self.x)


@dataclass
class TrainResult:
    history: list[tuple[int, float, float]]
    checkpoints: list[tuple[int, Path]]
    state: OptimState


LossFn = Callable[[Tensor, Tensor], Tensor]


def epoch_order(seed: int, epoch: int, T: int) -> np.ndarray:
    """Sample order for ``epoch``, independent of how many epochs ran before."""
    return np.random.default_rng([seed, epoch]).permutation(T)


def evaluate_loss(model: Module, data: Dataset, batch_size: int, loss_fn: LossFn = bce_with_logits) -> float:
    if len(data) == 0:
        return float("nan")
    total = 0.0
    with no_grad():
        for sl in batch_slices(len(data), batch_size):
            x = Tensor(data.x[sl])
            y = Tensor(data.y[sl][:, None].astype(x.dtype))
            total += loss_fn(model(x), y).item() * (sl.stop - sl.start)
    return total / len(data)


def write_loss_csv(path, history) -> None:
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{e},{tr:.9g},{va:.9g}" for e, tr, va in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_loss_csv(path) -> list[tuple[int, float, float]]:
    rows = Path(path).read_text(encoding="utf-8").strip().splitlines()[1:]
    out = []
    for r in rows:
        e, tr, va = r.split(",")
        out.append((int(e), float(tr), float(va)))
    return out


def train(model: Module, train_set: Dataset, cfg: TrainConfig, val_set: Dataset | None = None,
          out_dir=None, loss_fn: LossFn = bce_with_logits, resume_from=None,
          on_checkpoint: Callable[[int, Path], None] | None = None,
          on_epoch: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of minibatch SGD.

    With ``out_dir`` set, the loss curve is kept in ``loss.csv`` and a
    checkpoint is written every ``cfg.checkpoint_every`` epochs and after the
    final epoch.  ``resume_from`` continues from a saved checkpoint; the
    per-epoch shuffle depends only on (seed, epoch), so a resumed run
    reproduces an uninterrupted one.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    state = OptimState()
    history: list[tuple[int, float, float]] = []
    start = 0
    if resume_from is not None:
        start = load_checkpoint(resume_from, model, state)
        if out_dir is not None and (out_dir / "loss.csv").exists():
            history = [h for h in read_loss_csv(out_dir / "loss.csv") if h[0] <= start]

    named = list(model.named_parameters())
    checkpoints: list[tuple[int, Path]] = []
    T = len(train_set)
    for epoch in range(start + 1, cfg.epochs + 1):
        order = epoch_order(cfg.seed, epoch, T)
        running = 0.0
        for it, sl in enumerate(batch_slices(T, cfg.batch_size), start=1):
            idx = order[sl]
            x = Tensor(train_set.x[idx])
            y = Tensor(train_set.y[idx][:, None].astype(x.dtype))
            model.zero_grad()
            try:
                loss = loss_fn(model(x), y)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite forward at epoch {epoch}, iteration {it}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss is {value} at epoch {epoch}, iteration {it}")
            backward(loss)
            sgd_step(named, state, cfg)
            running += value * len(idx)
        train_loss = running / T
        val_loss = evaluate_loss(model, val_set, cfg.batch_size, loss_fn) if val_set is not None and len(val_set) else float("nan")
        history.append((epoch, train_loss, val_loss))
        log.info("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
        if out_dir is not None:
            write_loss_csv(out_dir / "loss.csv", history)
            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                path = out_dir / checkpoint_name(epoch)
                save_checkpoint(path, model, state, epoch)
                checkpoints.append((epoch, path))
                if on_checkpoint is not None:
                    on_checkpoint(epoch, path)
    return TrainResult(history, checkpoints, state)


def select_best(series: Sequence[tuple[int, float, object]]):
    """Pick the (epoch, miou, checkpoint) entry with the highest MIoU.

    Ties go to the earliest epoch.
    """
    if not series:
        raise ValueError("select_best: no evaluated checkpoints")
    return min(series, key=lambda item: (-item[1], item[0]))
