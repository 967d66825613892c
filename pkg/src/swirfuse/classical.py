"""
Classical trimodal fusion baselines: Laplacian pyramid, guided-filter fusion
(GFF), and the order-averaged cascade that lifts a bimodal operator to three
inputs.
"""

from __future__ import annotations

import enum
import itertools
import os
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np
from scipy import ndimage

from .image import DEFAULT_RANGE, Image, load_image, save_image, to_luminance

_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


class DetailRule(str, enum.Enum):
    ABS_MAX = "abs-max"


class BaseRule(str, enum.Enum):
    MEAN = "mean"
    LOCAL_ENERGY = "weighted-by-local-energy"


@dataclass(frozen=True)
class FusionRule:
    detail_rule: DetailRule = DetailRule.ABS_MAX
    base_rule: BaseRule = BaseRule.MEAN

    def __post_init__(self):
        object.__setattr__(self, "detail_rule", DetailRule(self.detail_rule))
        object.__setattr__(self, "base_rule", BaseRule(self.base_rule))


@dataclass
class Pyramid:
    levels: List[np.ndarray]
    base: np.ndarray

    @property
    def level_count(self) -> int:
        return len(self.levels)


def _as_plane(img) -> np.ndarray:
    return img.data if isinstance(img, Image) else np.asarray(img, dtype=np.float64)


def pyr_down(x: np.ndarray) -> np.ndarray:
    """Binomial blur then keep even rows/columns; output is ceil(dim / 2)."""
    blurred = ndimage.correlate1d(x, _BINOMIAL, axis=0, mode="nearest")
    blurred = ndimage.correlate1d(blurred, _BINOMIAL, axis=1, mode="nearest")
    return blurred[::2, ::2]


def _up_axis(x: np.ndarray, n: int, axis: int) -> np.ndarray:
    # polyphase form of zero-insertion followed by the 2x-gained binomial kernel
    x = np.moveaxis(x, axis, 0)
    prev = np.concatenate([x[:1], x[:-1]])
    nxt = np.concatenate([x[1:], x[-1:]])
    even = (prev + 6.0 * x + nxt) / 8.0
    odd = (x + nxt) / 2.0
    out = np.empty((2 * x.shape[0],) + x.shape[1:])
    out[0::2] = even
    out[1::2] = odd
    return np.moveaxis(out[:n], 0, axis)


def pyr_up(x: np.ndarray, shape) -> np.ndarray:
    return _up_axis(_up_axis(x, shape[0], 0), shape[1], 1)


def analyze(img, levels: int) -> Pyramid:
    """Laplacian pyramid with ``levels`` detail bands plus the Gaussian residual."""
    x = _as_plane(img)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if min(x.shape) < 2 ** levels:
        raise ValueError(f"{levels} levels need a minimum dimension of {2 ** levels}, got {min(x.shape)}")
    bands = []
    cur = x
    for _ in range(levels):
        nxt = pyr_down(cur)
        bands.append(cur - pyr_up(nxt, cur.shape))
        cur = nxt
    return Pyramid(bands, cur)


def synthesize(pyr: Pyramid) -> np.ndarray:
    cur = pyr.base
    for band in reversed(pyr.levels):
        cur = pyr_up(cur, band.shape) + band
    return cur


def _symmetric_mean(stack: np.ndarray) -> np.ndarray:
    # sorting first makes the float sum independent of input order
    return np.sort(stack, axis=0).sum(axis=0) / stack.shape[0]


def _abs_max(stack: np.ndarray) -> np.ndarray:
    mag = np.abs(stack)
    top = mag.max(axis=0)
    # ties in magnitude resolve to the largest signed value, which is order-free
    return np.where(mag == top, stack, -np.inf).max(axis=0)


def _local_energy_mean(stack: np.ndarray, size: int = 3) -> np.ndarray:
    energy = np.stack([ndimage.uniform_filter(b * b, size, mode="nearest") for b in stack]) + 1e-12
    order = np.argsort(stack, axis=0, kind="stable")
    vals = np.take_along_axis(stack, order, axis=0)
    wts = np.take_along_axis(energy, order, axis=0)
    return (vals * wts).sum(axis=0) / wts.sum(axis=0)


def lp_fuse(inputs: Sequence, levels: int = 4, rule: FusionRule = FusionRule()) -> Image:
    """Fuse equally sized planes band by band through Laplacian pyramids."""
    planes = [_as_plane(i) for i in inputs]
    if len({p.shape for p in planes}) != 1:
        raise ValueError("lp_fuse inputs must share dimensions")
    pyrs = [analyze(p, levels) for p in planes]
    bands = [_abs_max(np.stack([p.levels[k] for p in pyrs])) for k in range(levels)]
    bases = np.stack([p.base for p in pyrs])
    if rule.base_rule is BaseRule.MEAN:
        base = _symmetric_mean(bases)
    else:
        base = _local_energy_mean(bases)
    return Image(synthesize(Pyramid(bands, base)), _range_of(inputs))


def _range_of(inputs) -> tuple:
    for i in inputs:
        if isinstance(i, Image):
            return i.value_range
    return DEFAULT_RANGE


# ---------------------------------------------------------------------------
# Guided filter and GFF
# ---------------------------------------------------------------------------

def box_mean(x: np.ndarray, r: int) -> np.ndarray:
    """Mean over (2r+1)^2 windows via an integral image, replicate borders."""
    p = np.pad(x, r + 1, mode="edge")
    p[0, :] = 0.0
    p[:, 0] = 0.0
    s = p.cumsum(axis=0).cumsum(axis=1)
    h, w = x.shape
    k = 2 * r + 1
    tot = s[k:k + h, k:k + w] - s[0:h, k:k + w] - s[k:k + h, 0:w] + s[0:h, 0:w]
    return tot / (k * k)


def guided_filter(guide, src, radius: int, eps: float) -> np.ndarray:
    """Edge-preserving smoothing of ``src`` steered by ``guide`` (local linear model)."""
    g, p = _as_plane(guide), _as_plane(src)
    if g.shape != p.shape:
        raise ValueError("guide and input must share dimensions")
    if radius < 1 or eps <= 0:
        raise ValueError("need radius >= 1 and eps > 0")
    mg, mp = box_mean(g, radius), box_mean(p, radius)
    var = box_mean(g * g, radius) - mg * mg
    cov = box_mean(g * p, radius) - mg * mp
    a = cov / (var + eps)
    b = mp - a * mg
    return box_mean(a, radius) * g + box_mean(b, radius)


@dataclass(frozen=True)
class GffConfig:
    base_radius: int = 15          # 31x31 box for the two-scale split
    saliency_sigma: float = 5.0
    saliency_radius: int = 5
    base_gf: tuple = (45, 0.3)
    detail_gf: tuple = (7, 1e-6)


_LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def _normalize_weights(w: np.ndarray) -> np.ndarray:
    w = np.maximum(w, 0.0)
    tot = w.sum(axis=0)
    n = w.shape[0]
    return np.where(tot > 0, w / np.where(tot > 0, tot, 1.0), 1.0 / n)


def gff_weights(inputs: Sequence, cfg: GffConfig = GffConfig()):
    """Refined (base, detail) weight maps, each shaped (n, H, W) and summing to 1."""
    planes = [_as_plane(i) for i in inputs]
    if len({p.shape for p in planes}) != 1:
        raise ValueError("gff inputs must share dimensions")
    lo, hi = _range_of(inputs)
    sal = np.stack([
        ndimage.gaussian_filter(np.abs(ndimage.correlate(p, _LAPLACIAN, mode="nearest")),
                                cfg.saliency_sigma, mode="nearest",
                                truncate=cfg.saliency_radius / cfg.saliency_sigma)
        for p in planes])
    winner = np.argmax(sal, axis=0)  # ties go to the lowest index
    binary = np.stack([(winner == k).astype(np.float64) for k in range(len(planes))])
    guides = [(p - lo) / (hi - lo) for p in planes]
    wb = np.stack([guided_filter(g, m, *cfg.base_gf) for g, m in zip(guides, binary)])
    wd = np.stack([guided_filter(g, m, *cfg.detail_gf) for g, m in zip(guides, binary)])
    return _normalize_weights(wb), _normalize_weights(wd)


def gff_fuse(inputs: Sequence, cfg: GffConfig = GffConfig()) -> Image:
    """Two-scale guided-filter fusion of any number of equally sized planes."""
    planes = np.stack([_as_plane(i) for i in inputs]) if inputs else None
    if planes is None:
        raise ValueError("gff needs inputs")
    base = np.stack([box_mean(p, cfg.base_radius) for p in planes])
    detail = planes - base
    wb, wd = gff_weights(inputs, cfg)
    return Image((wb * base).sum(axis=0) + (wd * detail).sum(axis=0), _range_of(inputs))


# ---------------------------------------------------------------------------
# Cascade
# ---------------------------------------------------------------------------

BimodalOp = Callable[[Image, Image], Image]


class OperatorError(RuntimeError):
    pass


def _as_image(x) -> Image:
    return x if isinstance(x, Image) else Image(np.asarray(x, dtype=np.float64))


def cascade_order_avg(bimodal: BimodalOp, a, b, c, order_avg: bool = True, jobs: int = 1) -> Image:
    """Trimodal cascade F(F(x, y), z), averaged over all six input orders.

    With ``order_avg=False`` only the single pass F(F(a, b), c) is returned.
    """
    imgs = [_as_image(x) for x in (a, b, c)]
    if not order_avg:
        return bimodal(bimodal(imgs[0], imgs[1]), imgs[2])
    perms = list(itertools.permutations(range(3)))

    def run(perm):
        try:
            x, y, z = (imgs[i] for i in perm)
            return bimodal(bimodal(x, y), z)
        except Exception as exc:
            raise OperatorError(f"bimodal operator failed for order {perm}: {exc}") from exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(run, perms))
    else:
        outs = [run(p) for p in perms]
    acc = np.zeros_like(outs[0].data)
    for o in outs:  # fixed summation order
        acc = acc + o.data
    return Image(acc / len(outs), outs[0].value_range)


def pixel_mean(x: Image, y: Image) -> Image:
    return Image((x.data + y.data) / 2.0, x.value_range)


class ExternalOperator:
    """Bimodal operator backed by a shell command.

    The template holds ``{a}``, ``{b}`` and ``{out}`` placeholders for two input
    image paths and one output path. Inputs are written as 8-bit PNG.
    """

    def __init__(self, template: str, timeout: float = 600.0):
        for key in ("{a}", "{b}", "{out}"):
            if key not in template:
                raise ValueError(f"command template lacks {key}: {template!r}")
        self.template = template
        self.timeout = timeout

    def __call__(self, x: Image, y: Image) -> Image:
        with tempfile.TemporaryDirectory(prefix="swirfuse-ext-") as tmp:
            pa, pb, po = (os.path.join(tmp, n) for n in ("a.png", "b.png", "out.png"))
            save_image(x.rescaled(DEFAULT_RANGE), pa, bits=8)
            save_image(y.rescaled(DEFAULT_RANGE), pb, bits=8)
            cmd = self.template.format(a=shlex.quote(pa), b=shlex.quote(pb), out=shlex.quote(po))
            proc = subprocess.run(cmd, shell=True, capture_output=True, timeout=self.timeout)
            if proc.returncode != 0:
                raise OperatorError(
                    f"external operator exited {proc.returncode}: {proc.stderr.decode(errors='replace')[-500:]}")
            out = load_image(po)
        if out.planes == 3:
            out = to_luminance(out)
        return out.rescaled(x.value_range)
