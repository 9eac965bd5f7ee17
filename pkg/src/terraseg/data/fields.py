"""Field raster stacks: on-disk layout, channel packing and imbalance statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

ATTRIBUTES = ("aspect", "flow_accumulation", "slope", "ndvi", "yield")
FILENAMES = {
    "aspect": "aspect.png",
    "flow_accumulation": "flow.png",
    "slope": "slope.png",
    "ndvi": "ndvi.png",
    "yield": "yield.png",
}
MASK_FILE = "mask.png"
LUMA = np.array([0.299, 0.587, 0.114])


class IngestionError(ValueError):
    pass


@dataclass
class FieldStack:
    """Five RGB attribute rasters (H, W, 3) in [0, 1] plus a binary mask (H, W)."""

    attributes: dict[str, np.ndarray]
    mask: np.ndarray
    field_id: str = ""

    def __post_init__(self):
        missing = [a for a in ATTRIBUTES if a not in self.attributes]
        if missing:
            raise IngestionError(f"missing attributes: {missing}")
        H, W = self.mask.shape
        for name in ATTRIBUTES:
            if self.attributes[name].shape != (H, W, 3):
                raise IngestionError(
                    f"{name}: shape {self.attributes[name].shape} does not match mask {(H, W)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def channels(self) -> np.ndarray:
        """(15, H, W) float32: attribute-major, R/G/B within each attribute."""
        return np.concatenate(
            [self.attributes[a].transpose(2, 0, 1) for a in ATTRIBUTES]).astype(np.float32)


def to_grayscale(stack: FieldStack) -> np.ndarray:
    """(5, H, W) luma of each attribute (0.299 R + 0.587 G + 0.114 B)."""
    return np.stack([stack.attributes[a] @ LUMA for a in ATTRIBUTES]).astype(np.float32)


def grayscale_channels(x15: np.ndarray) -> np.ndarray:
    """Same conversion applied to an already packed (15, H, W) array."""
    x = x15.reshape(5, 3, *x15.shape[1:])
    return np.tensordot(LUMA, x, axes=([0], [1])).astype(np.float32)


def _read_png(path: Path, expect_rgb: bool) -> np.ndarray:
    if not path.exists():
        raise IngestionError(f"{path.name}: file not found in {path.parent}")
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB", "RGBA", "P"):
            raise IngestionError(f"{path.name}: unsupported mode {img.mode!r}; need 8-bit L or RGB")
        if img.mode in ("RGBA", "P"):
            img = img.convert("RGB")
        arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise IngestionError(f"{path.name}: expected 8-bit samples, got {arr.dtype}")
    if expect_rgb and arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if not expect_rgb and arr.ndim == 3:
        arr = arr[..., 0]
    return arr


def load_field(directory) -> FieldStack:
    directory = Path(directory)
    attrs = {}
    shape = None
    for name in ATTRIBUTES:
        arr = _read_png(directory / FILENAMES[name], expect_rgb=True)
        if shape is None:
            shape = arr.shape[:2]
        elif arr.shape[:2] != shape:
            raise IngestionError(f"{FILENAMES[name]}: size {arr.shape[:2]} differs from {shape}")
        attrs[name] = arr.astype(np.float64) / 255.0
    mask = _read_png(directory / MASK_FILE, expect_rgb=False)
    if mask.shape != shape:
        raise IngestionError(f"{MASK_FILE}: size {mask.shape} differs from {shape}")
    return FieldStack(attrs, (mask >= 128).astype(np.uint8), directory.name)


def save_field(stack: FieldStack, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ATTRIBUTES:
        rgb = np.clip(np.rint(stack.attributes[name] * 255), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(directory / FILENAMES[name])
    Image.fromarray((stack.mask > 0).astype(np.uint8) * 255, mode="L").save(directory / MASK_FILE)
    return directory


def stack_from_channels(x15: np.ndarray, mask: np.ndarray, field_id: str = "") -> FieldStack:
    attrs = {a: x15[3 * i:3 * i + 3].transpose(1, 2, 0).astype(np.float64)
             for i, a in enumerate(ATTRIBUTES)}
    return FieldStack(attrs, mask.astype(np.uint8), field_id)


# ---------------------------------------------------------------------------
# imbalance statistics
# ---------------------------------------------------------------------------

@dataclass
class ImbalanceStats:
    ratios: list[float]
    minimum: float
    maximum: float
    median: float
    mean: float
    std: float
    n_empty: int = 0
    empty_ids: list[int] = field(default_factory=list)

    def row(self) -> dict[str, float]:
        return {"min": self.minimum, "max": self.maximum, "median": self.median,
                "mean": self.mean, "std": self.std, "empty": self.n_empty}


def background_foreground_ratio(mask: np.ndarray) -> float | None:
    fg = int(np.count_nonzero(mask))
    if fg == 0:
        return None
    return (mask.size - fg) / fg


def imbalance_stats(masks) -> ImbalanceStats:
    """Background/foreground ratio statistics; empty masks are counted apart."""
    ratios, empty = [], []
    for i, m in enumerate(masks):
        r = background_foreground_ratio(np.asarray(m))
        if r is None:
            empty.append(i)
        else:
            ratios.append(r)
    if not ratios:
        raise ValueError("imbalance_stats: every mask is empty")
    a = np.array(ratios)
    return ImbalanceStats(ratios, float(a.min()), float(a.max()), float(np.median(a)),
                          float(a.mean()), float(a.std()), len(empty), empty)
