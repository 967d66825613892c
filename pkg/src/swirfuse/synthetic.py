"""
Procedural registered RGB/thermal scenes for tests, desk-scale training and
benchmarks. Nothing here pretends to be radiometrically realistic.
"""

from __future__ import annotations

from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .image import Image, Sample, ThermalBand


def smooth_field(rng: np.random.Generator, shape: Tuple[int, int], sigma: float) -> np.ndarray:
    """Zero-mean, unit-peak smooth random field."""
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    f -= f.mean()
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def _blobs(rng, shape, count, radius_range) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros(shape)
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(*radius_range)
        out += rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    return out


def _rects(rng, shape, count) -> np.ndarray:
    h, w = shape
    out = np.zeros(shape)
    for _ in range(count):
        y0, x0 = rng.integers(0, h - 2), rng.integers(0, w - 2)
        y1 = rng.integers(y0 + 2, min(h, y0 + h // 2) + 1)
        x1 = rng.integers(x0 + 2, min(w, x0 + w // 2) + 1)
        out[y0:y1, x0:x1] = rng.uniform(-1, 1)
    return out


def thermal_like(rng: np.random.Generator, shape: Tuple[int, int]) -> np.ndarray:
    """Smooth background with a few warm objects, 0-255 scale, integral levels."""
    bg = 90 + 40 * smooth_field(rng, shape, max(shape) / 6)
    hot = 120 * _blobs(rng, shape, 4, (max(shape) / 24, max(shape) / 8))
    noise = 1.5 * rng.standard_normal(shape)
    return np.clip(np.round(bg + hot + noise), 0, 255)


def scene(rng: np.random.Generator, shape: Tuple[int, int] = (64, 64), sid: str = "") -> Sample:
    """RGB with edges and texture, thermal with warm blobs."""
    h, w = shape
    structure = _rects(rng, shape, 6)
    tex = smooth_field(rng, shape, 1.0)
    planes = []
    for c in range(3):
        p = 120 + 60 * structure + 25 * smooth_field(rng, shape, max(shape) / 8) + 15 * tex + 10 * c
        planes.append(p)
    rgb = np.clip(np.round(np.stack(planes)), 0, 255)
    return Sample(Image(rgb), Image(thermal_like(rng, shape)), ThermalBand.LWIR, id=sid)


def crushed_texture_scene(rng: np.random.Generator, shape: Tuple[int, int] = (64, 64), sid: str = "",
                          texture_amp: float = 3.0) -> Sample:
    """Scene whose thermal plane hides fine texture in a narrow intensity band.

    The RGB plane is smooth, so the texture is recoverable only by stretching
    the thermal contrast locally.
    """
    h, w = shape
    rgb_base = 110 + 50 * smooth_field(rng, shape, max(shape) / 5)
    rgb = np.clip(np.round(np.stack([rgb_base + 8 * c for c in range(3)])), 0, 255)
    texture = np.sign(smooth_field(rng, shape, 0.8)) * texture_amp
    slow = 12 * smooth_field(rng, shape, max(shape) / 4)
    thermal = np.clip(np.round(100 + slow + texture), 0, 255)
    return Sample(Image(rgb), Image(thermal), ThermalBand.LWIR, id=sid)


def corpus(n: int, shape: Tuple[int, int] = (64, 64), seed: int = 0, kind: str = "scene") -> List[Sample]:
    rng = np.random.default_rng(seed)
    make = {"scene": scene, "crushed": crushed_texture_scene}[kind]
    return [make(rng, shape, sid=f"{kind}{i:03d}") for i in range(n)]
