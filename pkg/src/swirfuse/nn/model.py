"""
Trimodal late-fusion network: per-modality Light-GRLB encoders, a softmax
gate over pooled features, 1x1 mixing and a small tanh-bounded decoder.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..image import DEFAULT_RANGE, Image, Sample
from ..synswir import with_synswir
from .engine import LAPLACIAN, Node, Tape, check_finite

BRANCH_ARITY = {"v": 3, "t": 1, "s": 1}
TRIMODAL = ("v", "t", "s")
DUAL_BAND = ("v", "t")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    hidden: int = 32
    branches: Tuple[str, ...] = TRIMODAL
    slope: float = 0.2
    num_classes: int = 0        # > 0 adds 1x1 logit probes on each encoder output
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if not self.branches or any(b not in BRANCH_ARITY for b in self.branches):
            raise ValueError(f"branches must be drawn from {tuple(BRANCH_ARITY)}")
        if len(set(self.branches)) != len(self.branches):
            raise ValueError("duplicate branch")
        if self.channels < 1 or self.hidden < 1:
            raise ValueError("channels and hidden must be >= 1")

    def arities(self) -> Tuple[int, ...]:
        return tuple(BRANCH_ARITY[b] for b in self.branches)

    def shapes(self) -> Dict[str, tuple]:
        """Parameter name -> shape, in initialization order."""
        c, hid, m = self.channels, self.hidden, len(self.branches)
        out = {}
        for br in self.branches:
            k = f"enc_{br}"
            out[f"{k}.lift.w"] = (c, BRANCH_ARITY[br], 3, 3)
            out[f"{k}.lift.b"] = (c,)
            out[f"{k}.grlb.c1.w"] = (c, c, 3, 3)
            out[f"{k}.grlb.c1.b"] = (c,)
            out[f"{k}.grlb.c2.w"] = (c, 2 * c, 3, 3)
            out[f"{k}.grlb.c2.b"] = (c,)
            out[f"{k}.grlb.out.w"] = (c, 3 * c, 1, 1)
            out[f"{k}.grlb.out.b"] = (c,)
        out["gate.w1"] = (hid, m * c)
        out["gate.w2"] = (m, hid)
        out["mix.w"] = (c, c, 1, 1)
        out["mix.b"] = (c,)
        out["dec.c1.w"] = (c, c, 3, 3)
        out["dec.c1.b"] = (c,)
        out["dec.c2.w"] = (c, c, 3, 3)
        out["dec.c2.b"] = (c,)
        out["dec.out.w"] = (1, c, 1, 1)
        out["dec.out.b"] = (1,)
        if self.num_classes > 0:
            for br in self.branches:
                out[f"probe_{br}.w"] = (self.num_classes, c, 1, 1)
                out[f"probe_{br}.b"] = (self.num_classes,)
        return out


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig = ModelConfig()) -> "ModelParams":
        """Kaiming fan-in normal weights, zero biases, from ``config.seed``."""
        rng = np.random.default_rng(config.seed)
        gain = 2.0 / (1.0 + config.slope ** 2)
        tensors = {}
        for name, shape in config.shapes().items():
            if len(shape) == 1:
                tensors[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                tensors[name] = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def count(self, include_probes: bool = False) -> int:
        return int(sum(v.size for k, v in self.tensors.items()
                       if include_probes or not k.startswith("probe_")))

    def check_shapes(self) -> None:
        expected = self.config.shapes()
        if set(expected) != set(self.tensors):
            raise ValueError("parameter names do not match the architecture")
        for k, shape in expected.items():
            if self.tensors[k].shape != shape:
                raise ValueError(f"{k}: expected {shape}, got {self.tensors[k].shape}")


@dataclass
class ForwardResult:
    fused: Node               # (1, N, H, W), values in [0, 1]
    alpha: Node               # (N, M)
    features: Dict[str, Node]
    logits: Dict[str, Node]
    leaves: Dict[str, Node]
    tape: Tape


def _conv(tape, leaves, x, prefix):
    return tape.conv2d(x, leaves[prefix + ".w"], leaves[prefix + ".b"], name=prefix)


def light_grlb(tape: Tape, x: Node, leaves: Dict[str, Node], prefix: str, slope: float) -> Node:
    s1 = tape.lrelu(_conv(tape, leaves, x, prefix + ".c1"), slope)
    s2 = tape.lrelu(_conv(tape, leaves, tape.concat([x, s1]), prefix + ".c2"), slope)
    mixed = _conv(tape, leaves, tape.concat([x, s1, s2]), prefix + ".out")
    return tape.add(mixed, tape.depthwise(x, LAPLACIAN))


def encode(tape: Tape, x: Node, leaves: Dict[str, Node], branch: str, slope: float) -> Node:
    if x.value.shape[0] != BRANCH_ARITY[branch]:
        raise ValueError(f"branch {branch} expects {BRANCH_ARITY[branch]} planes, got {x.value.shape[0]}")
    lifted = tape.lrelu(_conv(tape, leaves, x, f"enc_{branch}.lift"), slope)
    return light_grlb(tape, lifted, leaves, f"enc_{branch}.grlb", slope)


def gate(tape: Tape, feats: Sequence[Node], leaves: Dict[str, Node], slope: float) -> Node:
    shapes = {f.value.shape for f in feats}
    if len(shapes) != 1:
        raise ValueError(f"gate inputs differ in shape: {shapes}")
    z = tape.concat([tape.gap(f) for f in feats], axis=1)
    hidden = tape.lrelu(tape.linear(z, leaves["gate.w1"]), slope)
    return tape.softmax(tape.linear(hidden, leaves["gate.w2"]))


def fuse_and_decode(tape: Tape, feats: Sequence[Node], alpha: Node, leaves: Dict[str, Node],
                    slope: float) -> Node:
    f = tape.weighted_sum(alpha, feats)
    f = _conv(tape, leaves, f, "mix")
    f = tape.lrelu(_conv(tape, leaves, f, "dec.c1"), slope)
    f = tape.lrelu(_conv(tape, leaves, f, "dec.c2"), slope)
    t = tape.tanh(_conv(tape, leaves, f, "dec.out"))
    return tape.affine(t, 0.5, 0.5)


def forward_arrays(params: ModelParams, inputs: Dict[str, np.ndarray], record: bool = False) -> ForwardResult:
    """Run the network on normalized inputs.

    ``inputs`` maps branch -> (planes, N, H, W) array scaled to [0, 1].
    """
    cfg = params.config
    tape = Tape(record=record)
    leaves = {k: tape.leaf(v, k) for k, v in params.tensors.items()}
    feats, logits = {}, {}
    for br in cfg.branches:
        if br not in inputs:
            raise ValueError(f"missing input for branch {br}")
        x = tape.leaf(check_finite(np.asarray(inputs[br], dtype=np.float64), f"input {br}"))
        feats[br] = encode(tape, x, leaves, br, cfg.slope)
        if cfg.num_classes > 0:
            logits[br] = _conv(tape, leaves, feats[br], f"probe_{br}")
    ordered = [feats[b] for b in cfg.branches]
    alpha = gate(tape, ordered, leaves, cfg.slope)
    fused = fuse_and_decode(tape, ordered, alpha, leaves, cfg.slope)
    return ForwardResult(fused, alpha, feats, logits, leaves, tape)


def sample_inputs(sample: Sample, branches: Sequence[str], swir_source: str = "synswir") -> Dict[str, np.ndarray]:
    """Normalized (planes, 1, H, W) arrays for each branch of one sample."""
    out = {}
    for br in branches:
        if br == "v":
            img = sample.rgb
        elif br == "t":
            img = sample.thermal
        elif swir_source == "real":
            if sample.real_swir is None:
                raise ValueError(f"sample {sample.id!r} has no real SWIR plane")
            img = sample.real_swir
        else:
            if sample.syn_swir is None:
                sample = with_synswir(sample)
            img = sample.syn_swir
        unit = (img.data - img.value_range[0]) / img.span
        out[br] = unit.reshape((img.planes, 1) + unit.shape[-2:])
    return out


def forward(sample: Sample, params: ModelParams, swir_source: str = "synswir",
            value_range=DEFAULT_RANGE) -> Tuple[Image, np.ndarray]:
    """Fuse one sample; returns the fused plane and the gate weights."""
    res = forward_arrays(params, sample_inputs(sample, params.config.branches, swir_source))
    lo, hi = value_range
    fused = lo + res.fused.value[0, 0] * (hi - lo)
    return Image(np.clip(fused, lo, hi), value_range), res.alpha.value[0].copy()


def dual_band(config: ModelConfig) -> ModelConfig:
    return dataclasses.replace(config, branches=DUAL_BAND)


def channels_for_budget(target: int = 251_000, branches=TRIMODAL, hidden: int = 32) -> int:
    """Smallest channel width whose parameter count reaches ``target``."""
    c = 1
    while param_count(ModelConfig(channels=c, hidden=hidden, branches=branches)) < target:
        c += 1
    return c


def param_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for k, s in config.shapes().items() if not k.startswith("probe_")))
