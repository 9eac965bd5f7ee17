"""Synthetic fields standing in for surveyed farm data.

Ground truth is rule-based: the composite of (smoothed) flow accumulation
and slope is cut into quantile zones, and one sampling disk is placed at
the most interior point of each zone, i.e. the cell furthest from the zone
boundary.  The disk radius is searched so the background/foreground ratio
lands near a target inside [30, 800].
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter, label

from .fields import ATTRIBUTES, FieldStack
from .terrain import (
    _normalize,
    derive_terrain,
    flow_accumulation_d8,
    log_scale,
    smooth_noise,
    synth_dem,
)

RATIO_RANGE = (30.0, 800.0)


def _quantize(a: np.ndarray) -> np.ndarray:
    # Keep values on the 8-bit grid so a PNG round trip is lossless.
    return np.rint(np.clip(a, 0, 1) * 255) / 255


def _zone_sites(score: np.ndarray, n_zones: int) -> list[tuple[int, int]]:
    edges = np.quantile(score, np.linspace(0, 1, n_zones + 1)[1:-1])
    zones = np.digitize(score, edges)
    sites = []
    for z in range(n_zones):
        members = zones == z
        if not members.any():
            continue
        # Largest connected piece of the zone; its interior-most cell.
        labels, n = label(members)
        if n > 1:
            sizes = np.bincount(labels.ravel())[1:]
            members = labels == (1 + int(sizes.argmax()))
        depth = distance_transform_edt(members)
        sites.append(tuple(int(v) for v in np.unravel_index(depth.argmax(), depth.shape)))
    return sites


def _site_distance2(shape, sites) -> np.ndarray:
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    d2 = np.full(shape, np.inf)
    for r, c in sites:
        d2 = np.minimum(d2, (rows - r) ** 2 + (cols - c) ** 2)
    return d2


def disk_mask(shape, sites, radius: float) -> np.ndarray:
    return (_site_distance2(shape, sites) <= radius ** 2).astype(np.uint8)


def _pick_radius(shape, sites, target_ratio: float) -> tuple[float, np.ndarray]:
    d2 = _site_distance2(shape, sites)
    sorted_d2 = np.sort(d2.ravel())
    total = d2.size
    lo, hi = RATIO_RANGE
    best = None
    for radius in np.arange(1.0, max(shape) / 4, 0.5):
        fg = int(np.searchsorted(sorted_d2, radius ** 2, side="right"))
        ratio = (total - fg) / fg
        key = (not lo <= ratio <= hi, abs(np.log(ratio / target_ratio)))
        if best is None or key < best[0]:
            best = (key, radius)
        if ratio < target_ratio / 2:
            break
    radius = best[1]
    return radius, (d2 <= radius ** 2).astype(np.uint8)


SITES_PER_572 = 6


def default_sites(H: int, W: int) -> int:
    """Site count at a fixed density: six per 572 x 572 field, at least one."""
    return max(1, round(SITES_PER_572 * H * W / 572 ** 2))


def synth_field(H: int = 572, W: int = 572, seed: int = 0, n_sites: int | None = None,
                target_ratio: float = 120.0, field_id: str | None = None) -> FieldStack:
    if n_sites is None:
        n_sites = default_sites(H, W)
    rng = np.random.default_rng(seed)
    n_hills = int(rng.integers(4, 10))
    dem = synth_dem(H, W, n_hills, seed=int(rng.integers(2**31)))
    slope, aspect = derive_terrain(dem)
    flow = log_scale(flow_accumulation_d8(dem))

    sigma = max(1.0, min(H, W) / 60)
    smooth_slope = _normalize(gaussian_filter(slope, sigma))
    ndvi = _normalize(0.6 * (1 - smooth_slope) + 0.4 * smooth_noise(H, W, rng, sigma=min(H, W) / 15))
    yld = _normalize(0.5 * ndvi + 0.3 * (1 - smooth_slope) + 0.2 * smooth_noise(H, W, rng, sigma=min(H, W) / 10))

    score = 0.6 * _normalize(gaussian_filter(flow, sigma)) + 0.4 * smooth_slope
    sites = _zone_sites(score, n_sites)
    _, mask = _pick_radius((H, W), sites, target_ratio)

    layers = {"aspect": aspect, "flow_accumulation": flow, "slope": slope, "ndvi": ndvi, "yield": yld}
    attrs = {a: np.repeat(_quantize(layers[a])[..., None], 3, axis=2) for a in ATTRIBUTES}
    return FieldStack(attrs, mask, field_id if field_id is not None else f"synth_{seed}")
