"""Synthetic elevation models and the terrain attributes derived from them."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

# D8 neighbour offsets (drow, dcol) in the fixed tie-break order N, NE, E, SE, S, SW, W, NW.
D8_OFFSETS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))
D8_DIST = tuple(np.hypot(dr, dc) for dr, dc in D8_OFFSETS)


def _normalize(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.zeros_like(a, dtype=np.float64)
    return (a - lo) / (hi - lo)


def smooth_noise(H: int, W: int, rng: np.random.Generator, sigma: float) -> np.ndarray:
    """Gaussian-filtered white noise rescaled to [0, 1]."""
    return _normalize(gaussian_filter(rng.standard_normal((H, W)), sigma, mode="reflect"))


def synth_dem(H: int, W: int, n_hills: int, seed: int, noise: float = 0.05,
              centers=None) -> np.ndarray:
    """Sum of seeded Gaussian hills plus low-amplitude smooth noise, scaled to [0, 1]."""
    if n_hills < 1:
        raise ValueError("n_hills must be >= 1")
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    z = np.zeros((H, W))
    scale = min(H, W)
    for i in range(n_hills):
        if centers is not None:
            cy, cx = centers[i]
        else:
            cy, cx = rng.uniform(0, H - 1), rng.uniform(0, W - 1)
        sigma = rng.uniform(0.08, 0.25) * scale
        amp = rng.uniform(0.5, 1.0)
        z += amp * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * sigma ** 2))
    if noise > 0:
        z += noise * smooth_noise(H, W, rng, sigma=max(2.0, scale / 40))
    return _normalize(z)


def derive_terrain(dem: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Slope magnitude and aspect, both rescaled to [0, 1].

    Rows run north to south and columns west to east.  Aspect is the compass
    bearing of steepest descent, clockwise from north, divided by 360; flat
    cells get aspect 0.
    """
    dem = np.asarray(dem, dtype=np.float64)
    if min(dem.shape) < 3:
        raise ValueError("derive_terrain needs at least 3x3 cells")
    d_row, d_east = np.gradient(dem)
    magnitude = np.hypot(d_row, d_east)
    slope = magnitude / magnitude.max() if magnitude.max() > 0 else np.zeros_like(dem)

    descent_east = -d_east
    descent_north = d_row  # z rising southward means descent points north
    bearing = np.degrees(np.arctan2(descent_east, descent_north)) % 360.0
    bearing = np.where((magnitude == 0) | (bearing >= 360.0), 0.0, bearing)
    return slope, bearing / 360.0


def d8_receivers(dem: np.ndarray) -> np.ndarray:
    """Flat index of each cell's steepest strictly-lower neighbour, or -1."""
    dem = np.asarray(dem, dtype=np.float64)
    H, W = dem.shape
    padded = np.pad(dem, 1, constant_values=np.inf)
    drops = np.empty((8, H, W))
    for k, ((dr, dc), dist) in enumerate(zip(D8_OFFSETS, D8_DIST)):
        neighbour = padded[1 + dr:1 + dr + H, 1 + dc:1 + dc + W]
        drops[k] = (dem - neighbour) / dist
    best = drops.argmax(axis=0)  # first maximum wins ties
    best_drop = np.take_along_axis(drops, best[None], axis=0)[0]
    rows, cols = np.mgrid[0:H, 0:W]
    dr = np.array([o[0] for o in D8_OFFSETS])[best]
    dc = np.array([o[1] for o in D8_OFFSETS])[best]
    receivers = (rows + dr) * W + (cols + dc)
    return np.where(best_drop > 0, receivers, -1).ravel()


def flow_accumulation_d8(dem: np.ndarray) -> np.ndarray:
    """Number of cells (including itself) whose D8 path passes through each cell."""
    dem = np.asarray(dem, dtype=np.float64)
    receivers = d8_receivers(dem)
    acc = np.ones(dem.size, dtype=np.int64)
    # Highest first: every donor is finished before its receiver is read.
    for i in np.argsort(-dem.ravel(), kind="stable"):
        j = receivers[i]
        if j >= 0:
            acc[j] += acc[i]
    return acc.reshape(dem.shape)


def log_scale(acc: np.ndarray) -> np.ndarray:
    """log(acc) / log(max acc), mapping accumulation counts to [0, 1]."""
    top = np.log(acc.max())
    if top <= 0:
        return np.zeros(acc.shape)
    return np.log(acc) / top
