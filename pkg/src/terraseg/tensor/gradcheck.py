"""Central-difference gradient checking (run under float64)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .core import Tensor, backward, precision


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    worst: list[tuple[str, tuple, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:g}, {self.checked} entries)")


def _rel(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                    names: Sequence[str] | None = None, tolerance: float = 1e-4,
                    h: float = 1e-5, max_entries: int | None = None,
                    seed: int = 0, floor: float = 1e-7) -> GradCheckReport:
    """Compare backward() against central differences of ``loss_fn``.

    ``loss_fn`` must rebuild the graph from the current ``.data`` of
    ``tensors`` on every call and return a scalar.  With ``max_entries`` set,
    a seeded random subset of entries per tensor is checked.
    """
    names = list(names) if names is not None else [f"t{i}" for i in range(len(tensors))]
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    rng = np.random.default_rng(seed)
    worst: list[tuple[str, tuple, float, float]] = []
    max_err = 0.0
    checked = 0
    for name, t, ga in zip(names, tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            an = float(ga.reshape(-1)[i])
            err = _rel(an, num, floor)
            checked += 1
            if err > max_err:
                max_err = err
                worst.append((name, np.unravel_index(i, t.shape), an, num))
    return GradCheckReport(max_err, tolerance, checked, worst[-5:])


def grad_check(op: Callable[..., Tensor], input_shapes: Sequence[tuple[int, ...]],
               tolerance: float = 1e-4, seed: int = 0, h: float = 1e-5,
               low: float = -1.0, high: float = 1.0) -> GradCheckReport:
    """Check ``op`` on random float64 inputs of ``input_shapes``.

    The op's output is reduced with a fixed random projection so every output
    entry contributes to the scalar being differentiated.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        inputs = [Tensor(rng.uniform(low, high, size=s), requires_grad=True) for s in input_shapes]
        probe = {}

        def loss_fn():
            out = op(*inputs)
            if "w" not in probe:
                probe["w"] = Tensor(rng.standard_normal(out.shape))
            return (out * probe["w"]).sum()

        return check_gradients(loss_fn, inputs, tolerance=tolerance, h=h)


# Every differentiable op with small input shapes, for grad_check sweeps.
OP_CASES = {
    "matmul": (lambda a, b: ops.matmul(a, b), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: ops.matmul(a, b), [(2, 3, 4), (4, 2)]),
    "conv2d_dilated": (lambda x, w, b: ops.conv2d(x, w, b, padding=2, dilation=2),
                       [(2, 6, 6), (3, 2, 3, 3), (3,)]),
    "conv2d_strided": (lambda x, w, b: ops.conv2d(x, w, b, stride=4, padding=3),
                       [(2, 2, 9, 9), (2, 2, 7, 7), (2,)]),
    "depthwise": (lambda x, w, b: ops.depthwise_conv2d(x, w, b, padding=1),
                  [(2, 3, 5, 5), (3, 3, 3), (3,)]),
    "softmax_scaled": (lambda x: ops.softmax_scaled(x, math.sqrt(8)), [(3, 8)]),
    "bilinear_up": (lambda x: ops.bilinear_resize(x, (7, 9)), [(2, 3, 4)]),
    "bilinear_down": (lambda x: ops.bilinear_resize(x, (2, 3)), [(1, 5, 7)]),
    "layer_norm": (lambda x, g, b: ops.layer_norm(x, g, b), [(4, 6), (6,), (6,)]),
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 4)]),
    "mul_broadcast": (lambda a, b: a * b, [(2, 3, 4), (3, 1)]),
    "sigmoid": (ops.sigmoid, [(5,)]),
    "gelu": (ops.gelu, [(7,)]),
    "softplus": (ops.softplus, [(7,)]),
    "exp": (ops.exp, [(4,)]),
    "log": (lambda x: ops.log(ops.add(ops.mul(x, x), 0.5)), [(4,)]),
    "power": (lambda x: ops.power(ops.add(ops.mul(x, x), 0.5), 2.5), [(4,)]),
    "scale": (lambda x: ops.scale(x, -2.5), [(3,)]),
    "concat": (lambda a, b: ops.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    "reshape_transpose": (lambda x: ops.reshape_transpose(x, (3, 8), (1, 0)), [(2, 3, 4)]),
    "mean_axis": (lambda x: ops.mean(x, axis=1), [(3, 4)]),
    "max_pool": (lambda x: ops.max_pool2d(x, 2), [(2, 4, 6)]),
    "relu": (ops.relu, [(9,)]),
    "clamp": (lambda x: ops.clamp(x, -2.0, 2.0), [(6,)]),
    "sum_axis": (lambda x: ops.sum(x, axis=0), [(3, 4)]),
    "transpose": (lambda x: ops.transpose(x, (2, 0, 1)), [(2, 3, 4)]),
}
