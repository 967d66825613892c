"""
Training losses with analytic gradients.

``recon_loss`` is the label-free surrogate used for default training;
``semantic_loss`` is the cross-entropy plus cross-branch consistency loss
exercised with synthetic labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..image import SOBEL_X, SOBEL_Y, Image, Sample, to_luminance
from ..synswir import with_synswir
from .engine import depthwise_adjoint, depthwise_raw


def _sobel_mag(x: np.ndarray):
    """Sobel magnitude of (1, N, H, W) maps with replicate borders."""
    gx = depthwise_raw(x, SOBEL_X)
    gy = depthwise_raw(x, SOBEL_Y)
    return np.sqrt(gx * gx + gy * gy), gx, gy


def recon_targets(sources: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel max intensity and max Sobel magnitude over the source axis.

    sources: (M, N, H, W) in normalized units.
    """
    inten = sources.max(axis=0, keepdims=True)
    grads = np.stack([_sobel_mag(s[None])[0][0] for s in sources])
    return inten, grads.max(axis=0, keepdims=True)


def recon_loss(fused: np.ndarray, sources: np.ndarray, grad_weight: float = 1.0):
    """mean|F - max_m S_m| + grad_weight * mean(| |grad F| - max_m |grad S_m| |).

    fused: (1, N, H, W); sources: (M, N, H, W). Returns (loss, dloss/dfused).
    """
    t_int, t_grad = recon_targets(sources)
    n = fused.size
    d_int = fused - t_int
    mag, gx, gy = _sobel_mag(fused)
    d_grad = mag - t_grad
    loss = float(np.abs(d_int).sum() / n + grad_weight * np.abs(d_grad).sum() / n)

    g_mag = grad_weight * np.sign(d_grad) / n
    safe = np.where(mag > 0, mag, 1.0)
    g_gx = np.where(mag > 0, g_mag * gx / safe, 0.0)
    g_gy = np.where(mag > 0, g_mag * gy / safe, 0.0)
    grad = np.sign(d_int) / n + depthwise_adjoint(g_gx, SOBEL_X) + depthwise_adjoint(g_gy, SOBEL_Y)
    return loss, grad


def source_stack(sample: Sample, branches=("v", "t", "s"), swir_source: str = "synswir") -> np.ndarray:
    """Normalized single-plane sources as an (M, 1, H, W) array (RGB enters as luma)."""
    planes = []
    for br in branches:
        if br == "v":
            img = to_luminance(sample.rgb)
        elif br == "t":
            img = sample.thermal
        elif swir_source == "real":
            img = sample.real_swir
        else:
            img = sample.syn_swir if sample.syn_swir is not None else with_synswir(sample).syn_swir
        planes.append((img.data - img.value_range[0]) / img.span)
    return np.stack(planes)[:, None]


def fusion_recon_loss(fused: Image, sample: Sample, branches=("v", "t", "s"), grad_weight: float = 1.0):
    """Reconstruction loss of a fused plane against a sample's sources.

    Works in units of each plane's value range; returns (loss, gradient with
    respect to the normalized fused plane, shaped (H, W)).
    """
    f = ((fused.data - fused.value_range[0]) / fused.span)[None, None]
    loss, grad = recon_loss(f, source_stack(sample, branches), grad_weight)
    return loss, grad[0, 0]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma)
        if min(vals) < 0 or max(vals) <= 0:
            raise ValueError("loss weights must be nonnegative with at least one positive")


def _softmax_ce(logits: np.ndarray, labels: np.ndarray):
    """Mean pixelwise softmax cross-entropy; logits (K, ...), labels (...)."""
    z = logits - logits.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    n = labels.size
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, labels[None], 1.0, axis=0)
    ce = float(-(onehot * logp).sum() / n)
    return ce, (np.exp(logp) - onehot) / n


def semantic_loss(logits_v: np.ndarray, logits_t: np.ndarray, logits_s: Optional[np.ndarray],
                  labels: np.ndarray, w: LossWeights = LossWeights()):
    """alpha * CE_v + beta * CE_t + gamma * consistency.

    Logits are (K, ...) with the class axis first; labels hold class indices
    over the remaining axes. Consistency is the per-pixel squared L2 distance
    between branch logits, averaged over pixels; with three branches it is the
    mean of the three pairwise terms. Returns (loss, (g_v, g_t, g_s)).
    """
    labels = np.asarray(labels)
    k = logits_v.shape[0]
    if labels.shape != logits_v.shape[1:]:
        raise ValueError("labels shape must match the logits' spatial shape")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    shapes = {logits_v.shape, logits_t.shape} | ({logits_s.shape} if logits_s is not None else set())
    if len(shapes) != 1:
        raise ValueError("branch logits must share a shape")

    ce_v, g_v = _softmax_ce(logits_v, labels)
    ce_t, g_t = _softmax_ce(logits_t, labels)
    g_v, g_t = w.alpha * g_v, w.beta * g_t
    g_s = None if logits_s is None else np.zeros_like(logits_s)
    n = labels.size

    if logits_s is None:
        pairs, scale = [(logits_v, logits_t, 0, 1)], 1.0
    else:
        pairs, scale = [(logits_v, logits_t, 0, 1), (logits_t, logits_s, 1, 2), (logits_v, logits_s, 0, 2)], 1.0 / 3
    grads = [g_v, g_t, g_s]
    cons = 0.0
    for a, b, ia, ib in pairs:
        d = a - b
        cons += float((d * d).sum() / n)
        g = w.gamma * scale * 2.0 * d / n
        grads[ia] = grads[ia] + g
        grads[ib] = grads[ib] - g
    loss = w.alpha * ce_v + w.beta * ce_t + w.gamma * scale * cons
    return loss, tuple(grads)
