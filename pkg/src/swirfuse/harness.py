"""
Batch pipeline: dataset ingestion, method dispatch, metric tables, radar
aggregation data and throughput benchmarking.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import resource
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .classical import ExternalOperator, cascade_order_avg, gff_fuse, lp_fuse, pixel_mean
from .image import DEFAULT_RANGE, Image, ImageFormatError, Sample, load_image, resize_bilinear, save_image, \
    to_luminance
from .metrics import MetricReport, score_fused, timed, write_reports
from .nn.model import DUAL_BAND, TRIMODAL, ModelConfig, ModelParams, forward
from .nn.weights import load_weights
from .synswir import ClaheConfig, with_synswir
from .synthetic import scene

log = logging.getLogger(__name__)

FIXED_METHODS = ("lp3", "gff3", "net-dual", "net-tri", "net-tri-realswir")
NET_METHODS = {"net-dual": DUAL_BAND, "net-tri": TRIMODAL, "net-tri-realswir": TRIMODAL}
# cascade:@name selects an in-process bimodal operator instead of a shell command
BUILTIN_BIMODAL: Dict[str, Callable[[Image, Image], Image]] = {
    "mean": pixel_mean,
    "lp2": lambda x, y: lp_fuse([x, y]),
    "gff2": lambda x, y: gff_fuse([x, y]),
}
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")
SCORE_SOURCES = ("rgb", "thermal", "synswir")
RADAR_METRICS = ("en", "sd", "sf", "mi", "vif", "qabf", "ssim")
REFERENCE_FPS = (("640x480", 70.0), ("1280x720", 30.2))


class ConfigError(ValueError):
    pass


def validate_method(name: str) -> str:
    if name in FIXED_METHODS:
        return name
    if name.startswith("cascade:"):
        body = name[len("cascade:"):]
        if body.startswith("@"):
            if body[1:] not in BUILTIN_BIMODAL:
                raise ConfigError(f"unknown builtin bimodal operator {body!r}")
        else:
            try:
                ExternalOperator(body)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        return name
    raise ConfigError(f"unknown method {name!r}; expected one of {FIXED_METHODS} or cascade:<cmd>")


def method_slug(name: str) -> str:
    """Filesystem-safe directory name for a method."""
    if name.startswith("cascade:"):
        body = name[len("cascade:"):]
        if body.startswith("@"):
            return "cascade-" + body[1:]
        return "cascade-" + format(abs(hash_text(body)), "08x")
    return name


def hash_text(text: str) -> int:
    # stable across processes, unlike hash()
    h = 2166136261
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 16777619) & 0xFFFFFFFF
    return h


@dataclass(frozen=True)
class RunConfig:
    dataset_dir: Optional[Path] = None
    methods: Tuple[str, ...] = ("lp3",)
    clahe: ClaheConfig = ClaheConfig()
    resize_to: Optional[Tuple[int, int]] = (640, 480)
    output_dir: Path = Path("out")
    seed: int = 0
    jobs: int = 1
    weights: Mapping[str, str] = field(default_factory=dict)
    save_fused: bool = True
    quantized_metrics: bool = True

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("at least one method is required")
        for m in self.methods:
            validate_method(m)
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.resize_to is not None and min(self.resize_to) < 1:
            raise ConfigError("resize_to must be positive")


@dataclass
class WarningRecord:
    kind: str
    message: str
    item: str = ""
    method: str = ""

    def as_dict(self):
        return {"kind": self.kind, "item": self.item, "method": self.method, "message": self.message}


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _stems(folder: Path) -> Dict[str, Path]:
    if not folder.is_dir():
        return {}
    out = {}
    for p in sorted(folder.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file():
            out.setdefault(p.stem, p)
    return out


def _as_rgb(img: Image) -> Image:
    return img if img.planes == 3 else Image(np.stack([img.data] * 3), img.value_range)


def _as_gray(img: Image) -> Image:
    return img if img.planes == 1 else to_luminance(img)


def load_sample(stem: str, rgb_path: Path, thermal_path: Path, swir_path: Optional[Path],
                resize_to: Optional[Tuple[int, int]], clahe_cfg: Optional[ClaheConfig]) -> Sample:
    """Load, resize and (optionally) derive SynSWIR for one stem."""
    rgb = _as_rgb(load_image(rgb_path))
    thermal = _as_gray(load_image(thermal_path))
    swir = _as_gray(load_image(swir_path)) if swir_path is not None else None
    if resize_to is not None:
        w, h = resize_to
        rgb, thermal = resize_bilinear(rgb, w, h), resize_bilinear(thermal, w, h)
        swir = resize_bilinear(swir, w, h) if swir is not None else None
    sample = Sample(rgb, thermal, real_swir=swir, id=stem)
    # resize comes first so CLAHE tiles refer to the final geometry
    return with_synswir(sample, clahe_cfg) if clahe_cfg is not None else sample


def ingest(config: RunConfig, need_swir: bool = False) -> Tuple[List[Sample], List[WarningRecord]]:
    """Registered samples in stem order, plus warning records for anything skipped."""
    warnings: List[WarningRecord] = []
    root = config.dataset_dir
    if root is None or not Path(root).is_dir():
        raise ConfigError(f"dataset directory {root} does not exist")
    root = Path(root)
    rgb, thermal, swir = _stems(root / "rgb"), _stems(root / "thermal"), _stems(root / "swir")
    if not rgb and not thermal:
        warnings.append(WarningRecord("empty", f"no images under {root}/rgb or {root}/thermal"))
    for stem in sorted(set(rgb) ^ set(thermal)):
        side = "rgb" if stem in rgb else "thermal"
        warnings.append(WarningRecord("orphan", f"{side} file has no partner", item=stem))
    samples = []
    for stem in sorted(set(rgb) & set(thermal)):
        sw = swir.get(stem)
        if need_swir and sw is None:
            warnings.append(WarningRecord("missing-swir", "no real SWIR plane", item=stem))
        try:
            samples.append(load_sample(stem, rgb[stem], thermal[stem], sw, config.resize_to, config.clahe))
        except (ImageFormatError, ValueError, OSError) as exc:
            warnings.append(WarningRecord("load-error", str(exc), item=stem))
    return samples, warnings


# ---------------------------------------------------------------------------
# Fusion dispatch
# ---------------------------------------------------------------------------

def classical_inputs(sample: Sample) -> List[Image]:
    """Luma, thermal and SynSWIR planes on the common 0-255 scale."""
    if sample.syn_swir is None:
        sample = with_synswir(sample)
    return [to_luminance(sample.rgb).rescaled(DEFAULT_RANGE), sample.thermal.rescaled(DEFAULT_RANGE),
            sample.syn_swir.rescaled(DEFAULT_RANGE)]


class Fuser:
    """Callable per method; network weights are loaded once up front."""

    def __init__(self, config: RunConfig, nets: Optional[Dict[str, ModelParams]] = None):
        self.nets: Dict[str, ModelParams] = dict(nets or {})
        for m in config.methods:
            if m in NET_METHODS and m not in self.nets:
                path = config.weights.get(m)
                if path is None:
                    raise ConfigError(f"method {m} needs a weights file")
                try:
                    params = load_weights(path)
                except (OSError, ValueError) as exc:
                    raise ConfigError(f"cannot load weights for {m}: {exc}") from exc
                if params.config.branches != NET_METHODS[m]:
                    raise ConfigError(f"{path} holds a {params.config.branches} model, {m} needs {NET_METHODS[m]}")
                self.nets[m] = params

    def __call__(self, method: str, sample: Sample) -> Image:
        if method == "lp3":
            return lp_fuse(classical_inputs(sample))
        if method == "gff3":
            return gff_fuse(classical_inputs(sample))
        if method.startswith("cascade:"):
            body = method[len("cascade:"):]
            op = BUILTIN_BIMODAL[body[1:]] if body.startswith("@") else ExternalOperator(body)
            return cascade_order_avg(op, *classical_inputs(sample))
        swir_source = "real" if method == "net-tri-realswir" else "synswir"
        fused, _ = forward(sample, self.nets[method], swir_source=swir_source)
        return fused


@dataclass
class RunResult:
    reports: List[MetricReport]
    warnings: List[WarningRecord]
    failures: int

    @property
    def exit_code(self) -> int:
        return 2 if self.failures else 0


def _fuse_item(fuser: Fuser, sample: Sample, method: str, config: RunConfig):
    if method == "net-tri-realswir" and sample.real_swir is None:
        raise ValueError("no real SWIR plane for net-tri-realswir")
    fused, seconds = timed(fuser, method, sample)
    report = score_fused(sample, fused, SCORE_SOURCES, method=method, wall_time=seconds,
                         quantized=config.quantized_metrics)
    return fused, report


def run_fuse(config: RunConfig, samples: Optional[Sequence[Sample]] = None) -> RunResult:
    """Fuse and score every (sample, method) pair, writing images, CSVs and a warnings sidecar."""
    warnings: List[WarningRecord] = []
    if samples is None:
        samples, warnings = ingest(config, need_swir="net-tri-realswir" in config.methods)
    fuser = Fuser(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = [(s, m) for s in samples for m in config.methods]

    def work(item):
        s, m = item
        try:
            return _fuse_item(fuser, s, m, config), None
        except Exception as exc:  # per-item failures are recorded, not fatal
            return None, WarningRecord("fuse-error", f"{type(exc).__name__}: {exc}", item=s.id, method=m)

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(work, items))  # map preserves submission order
    else:
        results = [work(it) for it in items]

    reports, failures = [], 0
    for (s, m), (res, err) in zip(items, results):
        if err is not None:
            failures += 1
            warnings.append(err)
            continue
        fused, report = res
        for w in report.warnings:
            warnings.append(WarningRecord("metric", w, item=s.id, method=m))
        if config.save_fused:
            d = out / "fused" / method_slug(m)
            d.mkdir(parents=True, exist_ok=True)
            save_image(fused.rescaled(DEFAULT_RANGE), d / f"{s.id}.png", bits=8)
        reports.append(report)
    write_reports(reports, out / "metrics.csv", out / "metrics_per_source.csv")
    write_warnings(warnings, out / "warnings.jsonl")
    return RunResult(reports, warnings, failures)


def write_warnings(warnings: Sequence[WarningRecord], path: Path) -> None:
    with open(path, "w") as fh:
        for w in warnings:
            fh.write(json.dumps(w.as_dict(), sort_keys=True) + "\n")


def score_directory(config: RunConfig, fused_dir: Path, method: str) -> RunResult:
    """Score pre-computed fused images (``<stem>.png`` etc.) against an ingested dataset."""
    samples, warnings = ingest(config)
    fused_files = _stems(Path(fused_dir))
    reports, failures = [], 0
    for s in samples:
        path = fused_files.get(s.id)
        if path is None:
            warnings.append(WarningRecord("missing-fused", "no fused image", item=s.id, method=method))
            failures += 1
            continue
        try:
            fused = _as_gray(load_image(path))
            if (fused.height, fused.width) != s.shape:
                fused = resize_bilinear(fused, s.shape[1], s.shape[0])
            reports.append(score_fused(s, fused, SCORE_SOURCES, method=method,
                                       quantized=config.quantized_metrics))
        except (ImageFormatError, ValueError, OSError) as exc:
            warnings.append(WarningRecord("score-error", str(exc), item=s.id, method=method))
            failures += 1
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_reports(reports, out / "metrics.csv", out / "metrics_per_source.csv")
    write_warnings(warnings, out / "warnings.jsonl")
    return RunResult(reports, warnings, failures)


def metric_columns(path) -> List[List[str]]:
    """CSV rows with the timing column dropped, for run-to-run comparison."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    drop = rows[0].index("ms_per_frame")
    return [[v for i, v in enumerate(r) if i != drop] for r in rows]


# ---------------------------------------------------------------------------
# Radar aggregation
# ---------------------------------------------------------------------------

@dataclass
class RadarTable:
    raw: Dict[str, Dict[str, Dict[str, float]]]         # dataset -> method -> metric -> mean score
    normalized: Dict[str, Dict[str, Dict[str, float]]]  # same layout, min-max scaled
    means: Dict[str, Dict[str, float]]                  # method -> metric -> mean over datasets
    metrics: Tuple[str, ...] = RADAR_METRICS
    flags: List[str] = field(default_factory=list)

    @property
    def methods(self) -> List[str]:
        return list(self.means)


def minmax(values: Mapping[str, float]) -> Dict[str, float]:
    """Min-max scale across methods; a zero range maps everything to 0.5."""
    lo, hi = min(values.values()), max(values.values())
    if hi == lo:
        return {k: 0.5 for k in values}
    return {k: (v - lo) / (hi - lo) for k, v in values.items()}


def read_report_means(path) -> Dict[str, Dict[str, float]]:
    """method -> metric -> mean over a report CSV's rows."""
    acc: Dict[str, Dict[str, List[float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            per = acc.setdefault(row["method"], {m: [] for m in RADAR_METRICS})
            for m in RADAR_METRICS:
                per[m].append(float(row[m]))
    return {meth: {m: float(np.mean(v)) for m, v in per.items()} for meth, per in acc.items()}


def radar_table(raw: Mapping[str, Mapping[str, Mapping[str, float]]],
                metrics: Sequence[str] = RADAR_METRICS) -> RadarTable:
    normalized, flags = {}, []
    for ds, per_method in raw.items():
        if len(per_method) < 2:
            flags.append(f"{ds}: single method, scores left unnormalized")
            normalized[ds] = {m: dict(v) for m, v in per_method.items()}
            continue
        cols = {k: minmax({m: per_method[m][k] for m in per_method}) for k in metrics}
        normalized[ds] = {m: {k: cols[k][m] for k in metrics} for m in per_method}
    methods = sorted({m for per in raw.values() for m in per})
    means = {}
    for m in methods:
        present = [normalized[ds][m] for ds in sorted(normalized) if m in normalized[ds]]
        means[m] = {k: float(np.mean([p[k] for p in present])) for k in metrics}
    return RadarTable({d: {m: dict(v) for m, v in p.items()} for d, p in raw.items()},
                      normalized, means, tuple(metrics), flags)


def radar_export(reports: Mapping[str, object], out_dir) -> RadarTable:
    """Build the radar table from ``{dataset: report CSV path}`` and write its CSVs."""
    table = radar_table({ds: read_report_means(p) for ds, p in sorted(reports.items())})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    normalized_ok = not table.flags
    with open(out / "radar.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", *table.metrics, "normalized"])
        for m in table.methods:
            w.writerow([m, *(f"{table.means[m][k]:.6f}" for k in table.metrics), int(normalized_ok)])
    n = len(table.metrics)
    with open(out / "radar_angular.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "metric", "angle_rad", "radius", "x", "y"])
        for m in table.methods:
            for i, k in enumerate(table.metrics):
                theta = 2.0 * math.pi * i / n
                r = table.means[m][k]
                w.writerow([m, k, f"{theta:.6f}", f"{r:.6f}", f"{r * math.cos(theta):.6f}",
                            f"{r * math.sin(theta):.6f}"])
    return table


# ---------------------------------------------------------------------------
# Throughput
# ---------------------------------------------------------------------------

BENCH_COLUMNS = ("method", "width", "height", "median_ms", "p10_ms", "p90_ms", "fps", "params", "peak_rss_mb")


@dataclass
class BenchRow:
    method: str
    width: int
    height: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    fps: float
    params: Optional[int]
    peak_rss_mb: float

    def row(self):
        return [self.method, self.width, self.height, f"{self.median_ms:.3f}", f"{self.p10_ms:.3f}",
                f"{self.p90_ms:.3f}", f"{self.fps:.3f}", "" if self.params is None else self.params,
                f"{self.peak_rss_mb:.1f}"]


def peak_rss_mb() -> float:
    # ru_maxrss is in KiB on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def bench_sample(size: Tuple[int, int], seed: int = 0) -> Sample:
    w, h = size
    s = scene(np.random.default_rng(seed), (h, w), sid="bench")
    return Sample(s.rgb, s.thermal, syn_swir=with_synswir(s).syn_swir, real_swir=s.thermal, id="bench")


def bench(config: RunConfig, size: Tuple[int, int] = (640, 480), reps: int = 3) -> List[BenchRow]:
    """Time each method on one synthetic sample; nets without weights use seeded init."""
    if reps < 3:
        raise ConfigError("bench needs reps >= 3")
    sample = bench_sample(size, config.seed)
    nets = {}
    for m in config.methods:
        if m in NET_METHODS:
            path = config.weights.get(m)
            nets[m] = load_weights(path) if path else ModelParams.init(
                ModelConfig(branches=NET_METHODS[m], seed=config.seed))
    fuser = Fuser(config, nets)
    rows = []
    for m in config.methods:
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fuser(m, sample)
            times.append((time.perf_counter() - t0) * 1000.0)
        med = float(np.median(times))
        rows.append(BenchRow(m, size[0], size[1], med, float(np.percentile(times, 10)),
                             float(np.percentile(times, 90)), 1000.0 / med,
                             nets[m].count() if m in nets else None, peak_rss_mb()))
    return rows


def write_bench(rows: Sequence[BenchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow(r.row())


def reference_annotations() -> List[str]:
    return [f"reference (published, different hardware): {res} at {fps:g} FPS; not compared"
            for res, fps in REFERENCE_FPS]


def parse_pair(text: str, cast=int, sep: str = ",") -> Tuple:
    parts = re.split(r"[,x]", text) if sep == "," else text.split(sep)
    if len(parts) != 2:
        raise ConfigError(f"expected two values, got {text!r}")
    try:
        return cast(parts[0].strip()), cast(parts[1].strip())
    except ValueError as exc:
        raise ConfigError(f"bad pair {text!r}") from exc

