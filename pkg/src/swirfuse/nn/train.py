"""
Training loop (Adam + cosine annealing), finite-difference gradient checks
and inference benchmarking for the fusion network.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..image import Sample
from ..synswir import ClaheConfig, with_synswir
from .engine import NonFiniteError
from .losses import LossWeights, recon_loss, semantic_loss, source_stack
from .model import ModelConfig, ModelParams, forward_arrays, sample_inputs

log = logging.getLogger(__name__)

Objective = Callable[[ModelParams], Tuple[float, Dict[str, np.ndarray]]]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    steps: Optional[int] = None      # overrides epochs when set
    batch_size: int = 8
    lr: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-5
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    crop: Optional[int] = 64
    grad_weight: float = 1.0
    seed: int = 0
    swir_source: str = "synswir"


def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    """Cosine annealing from ``lr`` at step 0 to ``lr_min`` at step ``total - 1``."""
    if total <= 1:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * step / (total - 1)))


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: ModelParams, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: Dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in params.names():  # fixed order
            w = params.tensors[k]
            g = grads.get(k)
            g = np.zeros_like(w) if g is None else g
            if self.weight_decay:
                g = g + self.weight_decay * w
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            w -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _leaf_grads(res) -> Dict[str, np.ndarray]:
    return {k: (np.zeros_like(n.value) if n.grad is None else n.grad) for k, n in res.leaves.items()}


def recon_objective(inputs: Dict[str, np.ndarray], sources: np.ndarray, grad_weight: float = 1.0) -> Objective:
    """Reconstruction loss of the network output as a function of the parameters."""

    def fn(params: ModelParams):
        res = forward_arrays(params, inputs, record=True)
        loss, g = recon_loss(res.fused.value, sources, grad_weight)
        res.tape.backward((res.fused, g))
        return loss, _leaf_grads(res)

    return fn


def semantic_objective(inputs: Dict[str, np.ndarray], labels: np.ndarray,
                       weights: LossWeights = LossWeights()) -> Objective:
    """Semantic loss over the per-branch logit probes (needs ``num_classes`` > 0)."""

    def fn(params: ModelParams):
        if params.config.num_classes <= 0:
            raise ValueError("semantic objective needs a model with logit probes")
        res = forward_arrays(params, inputs, record=True)
        lg = res.logits
        # class axis first: (K, N, H, W)
        loss, (gv, gt, gs) = semantic_loss(lg["v"].value, lg["t"].value,
                                           lg["s"].value if "s" in lg else None, labels, weights)
        seeds = [(lg["v"], gv), (lg["t"], gt)] + ([(lg["s"], gs)] if "s" in lg else [])
        res.tape.backward(*seeds)
        return loss, _leaf_grads(res)

    return fn


def grad_check(loss_fn: Objective, params: ModelParams, probe_count: int = 50, seed: int = 0,
               h: float = 1e-4, scale: float = 1e-2) -> float:
    """Max relative error between analytic and central-difference gradients.

    Each probed weight w is reparameterized as w = scale * u and ``u`` is
    stepped by +-h. The relative error's denominator is floored at 1e-8.
    """
    _, grads = loss_fn(params)
    rng = np.random.default_rng(seed)
    names = params.names()
    sizes = np.array([params[n].size for n in names])
    worst = 0.0
    for _ in range(probe_count):
        which = rng.choice(len(names), p=sizes / sizes.sum())
        name = names[which]
        idx = np.unravel_index(rng.integers(params[name].size), params[name].shape)
        w = params[name]
        orig = w[idx]
        w[idx] = orig + scale * h
        lp, _ = loss_fn(params)
        w[idx] = orig - scale * h
        lm, _ = loss_fn(params)
        w[idx] = orig
        numeric = (lp - lm) / (2 * h)
        analytic = scale * grads[name][idx]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


@dataclass
class TrainResult:
    params: ModelParams
    epoch_loss: List[float] = field(default_factory=list)
    step_loss: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)


def _prepare(dataset: Sequence[Sample], branches, cfg: TrainConfig, clahe_cfg: ClaheConfig):
    prepared = []
    for s in dataset:
        if "s" in branches and cfg.swir_source == "synswir" and s.syn_swir is None:
            s = with_synswir(s, clahe_cfg)
        prepared.append((sample_inputs(s, branches, cfg.swir_source),
                         source_stack(s, branches, cfg.swir_source)))
    return prepared


def _crop(arrs, crop, rng):
    h, w = next(iter(arrs[0].values())).shape[-2:]
    if crop is None or (crop >= h and crop >= w):
        return arrs
    ch, cw = min(crop, h), min(crop, w)
    y = int(rng.integers(0, h - ch + 1))
    x = int(rng.integers(0, w - cw + 1))
    inputs, sources = arrs
    return ({k: v[..., y:y + ch, x:x + cw] for k, v in inputs.items()}, sources[..., y:y + ch, x:x + cw])


def train(dataset: Sequence[Sample], config: TrainConfig = TrainConfig(),
          model: ModelConfig = ModelConfig(), clahe_cfg: ClaheConfig = ClaheConfig(),
          params: Optional[ModelParams] = None) -> TrainResult:
    """Train on the reconstruction surrogate; deterministic for a fixed seed."""
    if not dataset:
        raise ValueError("empty dataset")
    params = ModelParams.init(model) if params is None else params.copy()
    branches = params.config.branches
    prepared = _prepare(dataset, branches, config, clahe_cfg)
    rng = np.random.default_rng(config.seed)
    per_epoch = math.ceil(len(prepared) / config.batch_size)
    total = config.steps if config.steps is not None else config.epochs * per_epoch
    opt = Adam(params, config.betas, config.adam_eps, config.weight_decay)
    result = TrainResult(params)
    step = 0
    while step < total:
        order = rng.permutation(len(prepared))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            if step >= total:
                break
            batch = [_crop(prepared[i], config.crop, rng) for i in order[start:start + config.batch_size]]
            inputs = {k: np.concatenate([b[0][k] for b in batch], axis=1) for k in branches}
            sources = np.concatenate([b[1] for b in batch], axis=1)
            try:
                loss, grads = recon_objective(inputs, sources, config.grad_weight)(params)
            except NonFiniteError as exc:
                raise NonFiniteError(f"training diverged at step {step}: {exc}") from exc
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at step {step}")
            lr = cosine_lr(step, total, config.lr, config.lr_min)
            opt.step(params, grads, lr)
            result.step_loss.append(loss)
            result.lrs.append(lr)
            epoch_losses.append(loss)
            step += 1
        result.epoch_loss.append(float(np.mean(epoch_losses)))
        log.info("epoch %d: mean loss %.6f", len(result.epoch_loss), result.epoch_loss[-1])
    return result


def evaluate_recon(params: ModelParams, dataset: Sequence[Sample], swir_source: str = "synswir",
                   clahe_cfg: ClaheConfig = ClaheConfig(), grad_weight: float = 1.0) -> float:
    """Mean reconstruction loss over full (uncropped) samples."""
    cfg = TrainConfig(crop=None, swir_source=swir_source, grad_weight=grad_weight)
    losses = []
    for inputs, sources in _prepare(dataset, params.config.branches, cfg, clahe_cfg):
        res = forward_arrays(params, inputs)
        losses.append(recon_loss(res.fused.value, sources, grad_weight)[0])
    return float(np.mean(losses))


def count_params_and_bench(params: ModelParams, size: Tuple[int, int] = (640, 480), reps: int = 3,
                           seed: int = 0) -> Tuple[int, float, float]:
    """(learnable scalar count, median ms per frame, fps) for random inputs of ``size``."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    w, h = size
    rng = np.random.default_rng(seed)
    inputs = {b: rng.random((3 if b == "v" else 1, 1, h, w)) for b in params.config.branches}
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        forward_arrays(params, inputs)
        times.append((time.perf_counter() - t0) * 1000.0)
    med = float(np.median(times))
    return params.count(), med, 1000.0 / med
