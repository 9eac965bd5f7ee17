"""Crop/rotate/resize augmentation and the 572 -> 512 model-input bridge."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import rotate

from ..tensor.ops import interp_matrix
from .fields import FieldStack


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentSpec:
    center_crop_sizes: tuple[int, ...] = (900, 700, 572, 300)
    n_random_crops: int = 10
    random_crop_size: int = 572
    n_rotations: int = 20
    rotation_range_deg: tuple[float, float] = (5.0, 60.0)
    target_size: int = 572
    model_input_size: int = 512
    seed: int = 0


@dataclass
class Sample:
    x: np.ndarray        # (C, S, S) float32 in [0, 1]
    mask: np.ndarray     # (S, S) uint8 in {0, 1}
    augmentation: str
    field_id: str = ""


def resize_bilinear(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize the last two axes with half-pixel bilinear weights."""
    H, W = x.shape[-2:]
    if (H, W) == tuple(size):
        return x.copy()
    Ah = interp_matrix(H, size[0])
    Aw = interp_matrix(W, size[1])
    return (Ah @ x @ Aw.T).astype(x.dtype)


def resize_nearest(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    H, W = mask.shape
    rows = np.minimum((np.arange(size[0]) + 0.5) * H / size[0], H - 1).astype(int)
    cols = np.minimum((np.arange(size[1]) + 0.5) * W / size[1], W - 1).astype(int)
    return mask[np.ix_(rows, cols)]


def _binarize(mask: np.ndarray) -> np.ndarray:
    return (mask >= 0.5).astype(np.uint8)


def _crop(x, mask, top, left, size):
    return x[:, top:top + size, left:left + size], mask[top:top + size, left:left + size]


def _finish(x, mask, size, tag, field_id) -> Sample:
    x = np.clip(resize_bilinear(x, (size, size)), 0, 1).astype(np.float32)
    mask = _binarize(resize_nearest(mask, (size, size)))
    return Sample(x, mask, tag, field_id)


def center_crops(stack: FieldStack, spec: AugmentSpec, x=None) -> list[Sample]:
    x = stack.channels() if x is None else x
    H, W = stack.shape
    out = []
    for s in spec.center_crop_sizes:
        if s > H or s > W:
            continue
        xc, mc = _crop(x, stack.mask, (H - s) // 2, (W - s) // 2, s)
        out.append(_finish(xc, mc, spec.target_size, f"center{s}", stack.field_id))
    return out


def random_crops(stack: FieldStack, spec: AugmentSpec, rng: np.random.Generator, x=None) -> list[Sample]:
    x = stack.channels() if x is None else x
    H, W = stack.shape
    s = spec.random_crop_size
    out = []
    for i in range(spec.n_random_crops):
        top = int(rng.integers(0, H - s + 1))
        left = int(rng.integers(0, W - s + 1))
        xc, mc = _crop(x, stack.mask, top, left, s)
        out.append(_finish(xc, mc, spec.target_size, f"crop{i}@{top},{left}", stack.field_id))
    return out


def rotations(stack: FieldStack, spec: AugmentSpec, rng: np.random.Generator, x=None) -> list[Sample]:
    """Rotate the whole field (zero fill, same extent) and resize to the target."""
    x = stack.channels() if x is None else x
    lo, hi = spec.rotation_range_deg
    out = []
    for i in range(spec.n_rotations):
        angle = float(rng.uniform(lo, hi))
        xr = rotate(x, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
        mr = rotate(stack.mask, angle, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0)
        out.append(_finish(xr, mr, spec.target_size, f"rot{i}@{angle:.3f}", stack.field_id))
    return out


def augment(stack: FieldStack, spec: AugmentSpec = AugmentSpec(), grayscale: bool = False) -> list[Sample]:
    """Center-crop series, then random crops, then rotations; deterministic per seed."""
    H, W = stack.shape
    need = max(spec.target_size, spec.random_crop_size)
    if H < need or W < need:
        raise AugmentError(f"field {stack.field_id or '?'} is {H}x{W}; needs at least {need} in both extents")
    x = stack.channels()
    if grayscale:
        from .fields import grayscale_channels
        x = grayscale_channels(x)
    rng = np.random.default_rng(spec.seed)
    return (center_crops(stack, spec, x)
            + random_crops(stack, spec, rng, x)
            + rotations(stack, spec, rng, x))


def to_model_input(x: np.ndarray, mask: np.ndarray, size: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Center crop (C, S, S) / (S, S) down to ``size``."""
    S = mask.shape[0]
    off = (S - size) // 2
    return (np.ascontiguousarray(x[:, off:off + size, off:off + size]),
            np.ascontiguousarray(mask[off:off + size, off:off + size]))
