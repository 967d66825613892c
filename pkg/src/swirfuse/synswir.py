"""
Synthetic SWIR from thermal imagery via contrast-limited adaptive histogram
equalization, plus the structural checks used to compare SWIR-like planes.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .image import Image, Sample, round_half_away, sobel_xy


@dataclass(frozen=True)
class ClaheConfig:
    """CLAHE parameters.

    ``clip_limit`` is a multiple of the uniform bin height (total / bins);
    ``math.inf`` disables clipping.
    """

    tile_grid: Tuple[int, int] = (8, 8)
    clip_limit: float = 2.0
    bins: int = 256

    def __post_init__(self):
        rows, cols = self.tile_grid
        if rows < 1 or cols < 1:
            raise ValueError("tile_grid components must be >= 1")
        if not self.clip_limit >= 1.0:
            raise ValueError("clip_limit must be >= 1.0")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")


@dataclass(frozen=True)
class TileMapping:
    """Monotone lookup from histogram bin index to output level."""

    lut: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.lut) < 0):
            raise ValueError("tile mapping must be non-decreasing")


def clip_histogram(hist, clip_limit: float) -> np.ndarray:
    """Clip bins at ``ceil(clip_limit * total / bins)`` and redistribute the excess.

    Excess is spread evenly over all bins and re-clipped until less than one
    count per bin remains; the remainder goes one count per bin, starting at
    bin 0 and skipping bins already at the ceiling. Total mass is preserved.
    """
    h = np.asarray(hist).astype(np.int64).copy()
    if h.ndim != 1 or h.size == 0:
        raise ValueError("histogram must be a nonempty 1-D array")
    if np.any(h < 0):
        raise ValueError("histogram counts must be >= 0")
    if math.isinf(clip_limit):
        return h
    bins = h.size
    total = int(h.sum())
    ceiling = math.ceil(clip_limit * total / bins)
    excess = int(np.maximum(h - ceiling, 0).sum())
    np.minimum(h, ceiling, out=h)
    while excess >= bins:
        inc = excess // bins
        h += inc
        excess -= inc * bins
        excess += int(np.maximum(h - ceiling, 0).sum())
        np.minimum(h, ceiling, out=h)
    while excess > 0:
        for k in range(bins):
            if excess == 0:
                break
            if h[k] < ceiling:
                h[k] += 1
                excess -= 1
    return h


def identity_mapping(bins: int, value_range: Tuple[float, float]) -> TileMapping:
    lo, hi = value_range
    return TileMapping(lo + np.arange(bins) * ((hi - lo) / (bins - 1)))


def build_tile_mapping(hist, value_range: Tuple[float, float]) -> TileMapping:
    """Equalizing lookup from a (clipped) histogram.

    A histogram whose mass sits in a single bin has no usable cdf span and
    maps to the identity instead.
    """
    h = np.asarray(hist, dtype=np.float64)
    total = h.sum()
    if total <= 0:
        raise ValueError("cannot build a mapping from an all-zero histogram")
    lo, hi = value_range
    cdf = np.cumsum(h)
    cdf_min = cdf[cdf > 0][0]
    if total == cdf_min:
        return identity_mapping(h.size, value_range)
    lut = round_half_away((cdf - cdf_min) / (total - cdf_min) * (hi - lo)) + lo
    # bins below the first occupied one would go negative
    return TileMapping(np.maximum(lut, lo))


def bin_levels(data: np.ndarray, value_range: Tuple[float, float], bins: int) -> np.ndarray:
    """Linear level bucketing of samples into ``bins`` histogram bins."""
    lo, hi = value_range
    idx = np.floor((np.asarray(data) - lo) / (hi - lo) * bins)
    return np.clip(idx, 0, bins - 1).astype(np.intp)


def _tile_edges(n: int, parts: int) -> np.ndarray:
    return np.array([round(i * n / parts) for i in range(parts + 1)])


def _axis_blend(n: int, edges: np.ndarray):
    """Per-coordinate (lower tile, upper tile, upper weight) along one axis."""
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    pos = np.arange(n, dtype=np.float64)
    hi_idx = np.searchsorted(centers, pos, side="right")
    i0 = np.clip(hi_idx - 1, 0, len(centers) - 1)
    i1 = np.clip(hi_idx, 0, len(centers) - 1)
    span = centers[i1] - centers[i0]
    w = np.where(span > 0, (pos - centers[i0]) / np.where(span > 0, span, 1.0), 0.0)
    return i0, i1, w


def tile_mappings(img: Image, cfg: ClaheConfig) -> np.ndarray:
    """Stack of per-tile lookup tables, shape (rows, cols, bins)."""
    if img.planes != 1:
        raise ValueError("clahe expects a single-plane image")
    rows, cols = cfg.tile_grid
    if img.height < rows or img.width < cols:
        raise ValueError(f"image {img.height}x{img.width} smaller than tile grid {cfg.tile_grid}")
    levels = bin_levels(img.data, img.value_range, cfg.bins)
    ye = _tile_edges(img.height, rows)
    xe = _tile_edges(img.width, cols)
    luts = np.empty((rows, cols, cfg.bins))
    for r in range(rows):
        for c in range(cols):
            tile = levels[ye[r]:ye[r + 1], xe[c]:xe[c + 1]]
            hist = np.bincount(tile.ravel(), minlength=cfg.bins)
            if np.count_nonzero(hist) == 1:
                mapping = identity_mapping(cfg.bins, img.value_range)
            else:
                mapping = build_tile_mapping(clip_histogram(hist, cfg.clip_limit), img.value_range)
            luts[r, c] = mapping.lut
    return luts


def clahe(img: Image, cfg: ClaheConfig = ClaheConfig()) -> Image:
    """Contrast-limited adaptive histogram equalization of a single plane.

    Each pixel blends the lookups of the (up to) four nearest tile centres
    bilinearly; pixels outside the outermost centres use one or two lookups.
    """
    luts = tile_mappings(img, cfg)
    rows, cols = cfg.tile_grid
    levels = bin_levels(img.data, img.value_range, cfg.bins)
    y0, y1, wy = _axis_blend(img.height, _tile_edges(img.height, rows))
    x0, x1, wx = _axis_blend(img.width, _tile_edges(img.width, cols))
    Y0, Y1, WY = y0[:, None], y1[:, None], wy[:, None]
    X0, X1, WX = x0[None, :], x1[None, :], wx[None, :]
    out = ((1 - WY) * ((1 - WX) * luts[Y0, X0, levels] + WX * luts[Y0, X1, levels])
           + WY * ((1 - WX) * luts[Y1, X0, levels] + WX * luts[Y1, X1, levels]))
    lo, hi = img.value_range
    return img.with_data(np.clip(out, lo, hi))


def single_mapping_regions(shape: Tuple[int, int], cfg: ClaheConfig) -> np.ndarray:
    """Label map of pixels whose CLAHE output comes from exactly one tile lookup.

    Values are the flat tile index, or -1 where lookups are blended.
    """
    h, w = shape
    rows, cols = cfg.tile_grid
    y0, y1, wy = _axis_blend(h, _tile_edges(h, rows))
    x0, x1, wx = _axis_blend(w, _tile_edges(w, cols))
    ysingle = (y0 == y1) | (wy == 0)
    xsingle = (x0 == x1) | (wx == 0)
    labels = y0[:, None] * cols + x0[None, :]
    return np.where(ysingle[:, None] & xsingle[None, :], labels, -1)


def synthesize_swir(thermal: Image, cfg: ClaheConfig = ClaheConfig()) -> Image:
    """SWIR-like proxy plane: CLAHE of the thermal plane."""
    return clahe(thermal, cfg)


def with_synswir(sample: Sample, cfg: ClaheConfig = ClaheConfig()) -> Sample:
    """Copy of ``sample`` with its SynSWIR plane generated from the thermal plane."""
    return dataclasses.replace(sample, syn_swir=synthesize_swir(sample.thermal, cfg))


# ---------------------------------------------------------------------------
# Edge-histogram comparison
# ---------------------------------------------------------------------------

CANNY_SIGMA = 1.4
CANNY_HIGH_PERCENTILE = 90.0
CANNY_LOW_RATIO = 0.4


def canny_edges(arr: np.ndarray, sigma: float = CANNY_SIGMA,
                high_percentile: float = CANNY_HIGH_PERCENTILE,
                low_ratio: float = CANNY_LOW_RATIO) -> Tuple[np.ndarray, np.ndarray]:
    """Canny edge mask with percentile thresholds; returns (mask, gradient magnitude)."""
    smooth = ndimage.gaussian_filter(np.asarray(arr, dtype=np.float64), sigma, mode="nearest")
    gx, gy = sobel_xy(smooth)
    mag = np.hypot(gx, gy)
    high = np.percentile(mag, high_percentile)
    if high <= 0:
        return np.zeros(mag.shape, dtype=bool), mag
    low = low_ratio * high

    # non-maximum suppression along the quantized gradient direction
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    padded = np.pad(mag, 1)
    h, w = mag.shape

    def shifted(dy, dx):
        return padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    sector = np.digitize(angle, [22.5, 67.5, 112.5, 157.5]) % 4
    offsets = [((0, 1), (0, -1)), ((1, 1), (-1, -1)), ((1, 0), (-1, 0)), ((1, -1), (-1, 1))]
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (fwd, back) in enumerate(offsets):
        m = (sector == s) & (mag >= shifted(*fwd)) & (mag >= shifted(*back))
        keep |= m
    nms = np.where(keep, mag, 0.0)

    weak = nms >= low
    strong = nms >= high
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros(mag.shape, dtype=bool), mag
    hit = np.zeros(n + 1, dtype=bool)
    hit[np.unique(labels[strong])] = True
    hit[0] = False
    return hit[labels], mag


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in bits between two normalized histograms."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    return max(0.0, 0.5 * kl(p) + 0.5 * kl(q))


def edge_histogram_js(a: Image, b: Image, bins: int = 64) -> Optional[float]:
    """JS divergence (bits) of gradient-magnitude histograms inside Canny masks.

    Returns None when either image has no edges.
    """
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError("images must share dimensions")
    mask_a, mag_a = canny_edges(a.data)
    mask_b, mag_b = canny_edges(b.data)
    if not mask_a.any() or not mask_b.any():
        return None
    va, vb = mag_a[mask_a], mag_b[mask_b]
    lo = min(va.min(), vb.min())
    hi = max(va.max(), vb.max())
    if hi <= lo:
        hi = lo + 1.0
    p, _ = np.histogram(va, bins=bins, range=(lo, hi))
    q, _ = np.histogram(vb, bins=bins, range=(lo, hi))
    return js_divergence(p / p.sum(), q / q.sum())
