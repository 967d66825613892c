"""
Fusion quality metrics: EN, SD, SF, MI, fusion MI, SSIM, Qabf and VIF, and the
per-source averaging used to score a fused plane against its inputs.

Metric functions take an Image (rescaled to 0-255 first) or a bare 2-D array
(used as-is, assumed to already be on the 0-255 scale).
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

from .image import DEFAULT_RANGE, Image, Sample, quantize, sobel_xy, to_luminance

log = logging.getLogger(__name__)

BINS = 256

# Xydeas-Petrovic sigmoid constants: (Gamma, kappa, sigma) for strength / orientation
QABF_G = (0.9994, -15.0, 0.5)
QABF_A = (0.9879, -22.0, 0.8)

VIF_SCALES = 4
VIF_NOISE_VAR = 2.0
VIF_EPS = 1e-10

REPORT_COLUMNS = ("id", "method", "en", "sd", "sf", "mi", "vif", "qabf", "ssim", "ms_per_frame")
PER_SOURCE_COLUMNS = ("id", "method", "source", "mi", "vif", "qabf", "ssim")
FULL_REFERENCE = ("mi", "vif", "qabf", "ssim")


def _plane(img) -> np.ndarray:
    if isinstance(img, Image):
        if img.planes == 3:
            img = to_luminance(img)
        return img.rescaled(DEFAULT_RANGE).data
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D plane, got shape {arr.shape}")
    return arr


def _levels(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(arr), 0, BINS - 1).astype(np.intp)


def _plogp_sum(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-np.sum(nz * np.log2(nz)))


def entropy(img) -> float:
    """Shannon entropy (bits) of the 256-bin level histogram."""
    lv = _levels(_plane(img))
    p = np.bincount(lv.ravel(), minlength=BINS) / lv.size
    return _plogp_sum(p)


@dataclass
class HistogramPair:
    joint: np.ndarray
    marginal_a: np.ndarray
    marginal_b: np.ndarray
    bins: int = BINS

    @classmethod
    def of(cls, a, b, bins: int = BINS) -> "HistogramPair":
        la, lb = _levels(_plane(a)), _levels(_plane(b))
        if la.shape != lb.shape:
            raise ValueError(f"dimension mismatch: {la.shape} vs {lb.shape}")
        joint = np.bincount((la * bins + lb).ravel(), minlength=bins * bins).reshape(bins, bins)
        return cls(joint, joint.sum(axis=1), joint.sum(axis=0), bins)


def mutual_information(a, b) -> float:
    """MI (bits) from the 256x256 joint level histogram."""
    hp = HistogramPair.of(a, b)
    n = hp.joint.sum()
    pxy = hp.joint / n
    px = hp.marginal_a / n
    py = hp.marginal_b / n
    i, j = np.nonzero(pxy)
    val = float(np.sum(pxy[i, j] * np.log2(pxy[i, j] / (px[i] * py[j]))))
    return max(val, 0.0)


def fusion_mutual_information(a, b, fused) -> float:
    """MI(a, fused) + MI(b, fused)."""
    return mutual_information(a, fused) + mutual_information(b, fused)


def std_dev(img) -> float:
    """Population standard deviation."""
    x = _plane(img)
    return float(np.sqrt(np.mean((x - x.mean()) ** 2)))


def spatial_frequency(img) -> float:
    x = _plane(img)
    m, n = x.shape
    if m < 2 or n < 2:
        raise ValueError("spatial frequency needs at least 2 rows and 2 columns")
    row = np.sum(np.diff(x, axis=1) ** 2) / (m * (n - 1))
    col = np.sum(np.diff(x, axis=0) ** 2) / ((m - 1) * n)
    return float(np.sqrt(row + col))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = (size - 1) / 2.0
    ax = np.arange(size) - r
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _wfilter(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    return ndimage.correlate(x, win, mode="nearest")


def ssim(a, b, data_range: float = 255.0) -> float:
    """Mean SSIM over 11x11 Gaussian windows (sigma 1.5), replicate borders."""
    x, y = _plane(a), _plane(b)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < 11:
        raise ValueError("ssim needs images of at least 11x11")
    win = _gaussian_window(11, 1.5)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _wfilter(x, win), _wfilter(y, win)
    vx = _wfilter(x * x, win) - mx * mx
    vy = _wfilter(y * y, win) - my * my
    cxy = _wfilter(x * y, win) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def _strength_orientation(x: np.ndarray):
    gx, gy = sobel_xy(x)
    g = np.hypot(gx, gy)
    # orientation folded onto (-pi/2, pi/2]; flat pixels read as vertical edges
    alpha = np.arctan(np.divide(gy, gx, out=np.full_like(gy, np.inf), where=gx != 0))
    alpha = np.where((gx == 0) & (gy == 0), np.pi / 2, alpha)
    return g, alpha


def _edge_preservation(gs, as_, gf, af) -> np.ndarray:
    ratio = np.ones_like(gs)
    lower = gs > gf
    np.divide(gf, gs, out=ratio, where=lower)
    np.divide(gs, gf, out=ratio, where=(~lower) & (gf > 0))
    # both flat: treated as perfectly preserved strength, weight is zero anyway
    orient = 1.0 - np.abs(as_ - af) / (np.pi / 2)
    tg, kg, sg = QABF_G
    ta, ka, sa = QABF_A
    qg = tg / (1.0 + np.exp(kg * (ratio - sg)))
    qa = ta / (1.0 + np.exp(ka * (orient - sa)))
    return qg * qa


def _qabf_parts(sources, fused):
    gf, af = _strength_orientation(fused)
    num = np.zeros_like(fused)
    den = np.zeros_like(fused)
    for s in sources:
        gs, as_ = _strength_orientation(s)
        num += _edge_preservation(gs, as_, gf, af) * gs
        den += gs
    return float(num.sum()), float(den.sum())


def qabf(sources: Sequence, fused, warn: bool = True) -> Optional[float]:
    """Gradient-based edge transfer score in [0, 1].

    One source gives the single-source ratio, two sources the classic
    weighted form, and three or more the mean of all pairwise scores.
    Returns None when every source is flat (zero total weight).
    """
    planes = [_plane(s) for s in sources]
    f = _plane(fused)
    if not planes:
        raise ValueError("qabf needs at least one source")
    if any(p.shape != f.shape for p in planes):
        raise ValueError("qabf inputs must share dimensions")
    groups = [planes] if len(planes) <= 2 else [
        [planes[i], planes[j]] for i in range(len(planes)) for j in range(i + 1, len(planes))]
    scores = []
    for grp in groups:
        num, den = _qabf_parts(grp, f)
        if den > 0:
            scores.append(num / den)
    if not scores:
        if warn:
            log.warning("qabf undefined: all source gradients are zero")
        return None
    return float(np.mean(scores))


def _vif_window(scale: int) -> np.ndarray:
    n = 2 ** (VIF_SCALES - scale + 1) + 1
    return _gaussian_window(n, n / 5.0)


def vif(ref, dist) -> float:
    """Four-scale pixel-domain visual information fidelity."""
    r, d = _plane(ref), _plane(dist)
    if r.shape != d.shape:
        raise ValueError(f"dimension mismatch: {r.shape} vs {d.shape}")
    if min(r.shape) < 16:
        raise ValueError("vif needs images of at least 16x16")
    num = den = 0.0
    for scale in range(1, VIF_SCALES + 1):
        win = _vif_window(scale)
        if scale > 1:
            r = _wfilter(r, win)[::2, ::2]
            d = _wfilter(d, win)[::2, ::2]
        mr, md = _wfilter(r, win), _wfilter(d, win)
        vr = np.maximum(_wfilter(r * r, win) - mr * mr, 0.0)
        vd = np.maximum(_wfilter(d * d, win) - md * md, 0.0)
        cov = _wfilter(r * d, win) - mr * md
        g = cov / (vr + VIF_EPS)
        sv = np.maximum(vd - g * cov, 0.0)
        num += float(np.sum(np.log2(1.0 + g * g * vr / (sv + VIF_NOISE_VAR))))
        den += float(np.sum(np.log2(1.0 + vr / VIF_NOISE_VAR)))
    if den == 0.0:
        # flat reference: fidelity is perfect only if the distorted plane is flat too
        return 1.0 if np.allclose(_plane(dist), _plane(dist).flat[0]) else 0.0
    return num / den


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    en: float
    sd: float
    sf: float
    mi: float
    vif: float
    qabf: float
    ssim: float
    per_source: Dict[str, Dict[str, float]] = field(default_factory=dict)
    fmi: Optional[float] = None
    method: str = ""
    image_id: str = ""
    wall_time: float = 0.0
    warnings: list = field(default_factory=list)

    def row(self) -> Dict[str, str]:
        vals = {"id": self.image_id, "method": self.method}
        for k in REPORT_COLUMNS[2:-1]:
            vals[k] = f"{getattr(self, k):.6f}"
        vals["ms_per_frame"] = f"{self.wall_time * 1000.0:.3f}"
        return vals

    def source_rows(self):
        for name in sorted(self.per_source):
            vals = {"id": self.image_id, "method": self.method, "source": name}
            for k in FULL_REFERENCE:
                vals[k] = f"{self.per_source[name][k]:.6f}"
            yield vals


def source_planes(sample: Sample, sources=("rgb", "thermal", "synswir")) -> Dict[str, Image]:
    """The sample's planes usable as metric references, keyed by source name."""
    table = {
        "rgb": to_luminance(sample.rgb),
        "thermal": sample.thermal,
        "synswir": sample.syn_swir,
        "swir": sample.real_swir,
    }
    return {k: table[k] for k in sources if table.get(k) is not None}


def score_planes(sources: Mapping[str, object], fused, method: str = "", image_id: str = "",
                 wall_time: float = 0.0, quantized: bool = True) -> MetricReport:
    """Score ``fused`` against each named source and average the full-reference metrics."""
    if not sources:
        raise ValueError("no sources available to score against")
    if isinstance(fused, Image):
        f = fused.rescaled(DEFAULT_RANGE)
        f_arr = quantize(f, 8).astype(np.float64) if quantized else f.data
    else:
        f_arr = _plane(fused)
    per_source, warnings = {}, []
    for name, src in sources.items():
        s = _plane(src)
        q = qabf([s], f_arr, warn=False)
        if q is None:
            warnings.append(f"qabf undefined against {name}; reported as 0")
            q = 0.0
        per_source[name] = {
            "mi": mutual_information(s, f_arr),
            "vif": vif(s, f_arr),
            "qabf": q,
            "ssim": ssim(s, f_arr),
        }
    means = {k: float(np.mean([v[k] for v in per_source.values()])) for k in FULL_REFERENCE}
    # fusion MI generalizes to the sum of per-source MI
    fmi = float(sum(v["mi"] for v in per_source.values()))
    for w in warnings:
        log.warning("%s/%s: %s", method, image_id, w)
    return MetricReport(
        en=entropy(f_arr), sd=std_dev(f_arr), sf=spatial_frequency(f_arr),
        per_source=per_source, fmi=fmi, method=method, image_id=image_id,
        wall_time=wall_time, warnings=warnings, **means)


def score_fused(sample: Sample, fused, sources=("rgb", "thermal", "synswir"), **kwargs) -> MetricReport:
    kwargs.setdefault("image_id", sample.id)
    return score_planes(source_planes(sample, sources), fused, **kwargs)


def write_reports(reports: Sequence[MetricReport], path, per_source_path=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
    if per_source_path is not None:
        with open(per_source_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=PER_SOURCE_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in reports:
                w.writerows(r.source_rows())


def timed(fn, *args, **kwargs):
    """Call ``fn`` and return (result, seconds)."""
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
