"""
Command-line entry point: ``swirfuse <subcommand> [options]``.

Exit status: 0 on success, 1 on configuration errors, 2 when some items
failed but the run completed.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from . import harness
from .harness import ConfigError, RunConfig, parse_pair
from .image import ImageFormatError, load_image, save_image
from .nn.losses import LossWeights, source_stack
from .nn.model import DUAL_BAND, TRIMODAL, ModelConfig, ModelParams, sample_inputs
from .nn.train import TrainConfig, grad_check, recon_objective, semantic_objective, train
from .nn.weights import save_weights
from .synswir import ClaheConfig, synthesize_swir, with_synswir
from .synthetic import corpus

log = logging.getLogger("swirfuse")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def _read_config(path: Optional[str]) -> Dict[str, str]:
    """Flatten an INI file into ``section.key`` -> value (keys of [run] are bare)."""
    if not path:
        return {}
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for section in cp.sections():
        for k, v in cp.items(section):
            out[k if section == "run" else f"{section}.{k}"] = v
    return out


def _pick(args, cfg: Dict[str, str], name: str, default=None, cast=str):
    val = getattr(args, name, None)
    if val is not None:
        return val
    if name in cfg:
        try:
            return cast(cfg[name])
        except ValueError as exc:
            raise ConfigError(f"bad value for {name}: {cfg[name]!r}") from exc
    return default


def _clahe(args, cfg) -> ClaheConfig:
    tiles = _pick(args, cfg, "tiles", "8,8")
    clip = _pick(args, cfg, "clip", 2.0, float)
    bins = _pick(args, cfg, "bins", 256, int)
    try:
        return ClaheConfig(tuple(parse_pair(tiles) if isinstance(tiles, str) else tiles),
                           math.inf if float(clip) <= 0 else float(clip), int(bins))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _weights(args, cfg) -> Dict[str, str]:
    out = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("weights.")}
    for item in getattr(args, "weights", None) or []:
        method, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--weights expects METHOD=PATH, got {item!r}")
        out[method] = path
    return out


def _resize(args, cfg):
    text = _pick(args, cfg, "resize", "640,480")
    if str(text).lower() in ("none", "off", ""):
        return None
    return parse_pair(str(text))


def _methods(args, cfg) -> tuple:
    raw = _pick(args, cfg, "methods", "lp3")
    if isinstance(raw, str):
        raw = [m.strip() for m in raw.split(";") if m.strip()]
    return tuple(raw)


def run_config(args, cfg) -> RunConfig:
    dataset = _pick(args, cfg, "dataset")
    return RunConfig(
        dataset_dir=Path(dataset) if dataset else None,
        methods=_methods(args, cfg),
        clahe=_clahe(args, cfg),
        resize_to=_resize(args, cfg),
        output_dir=Path(_pick(args, cfg, "out", "out")),
        seed=_pick(args, cfg, "seed", 0, int),
        jobs=_pick(args, cfg, "jobs", 1, int),
        weights=_weights(args, cfg),
    )


def _report(result) -> int:
    for w in result.warnings:
        log.warning("%s %s %s: %s", w.kind, w.item, w.method, w.message)
    return result.exit_code


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synswir(args, cfg) -> int:
    ccfg = _clahe(args, cfg)
    src = Path(args.input)
    out = Path(_pick(args, cfg, "out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in harness.IMAGE_SUFFIXES) if src.is_dir() else [src]
    failures = 0
    for p in files:
        try:
            img = load_image(p)
            if img.planes == 3:
                raise ImageFormatError("thermal input must be single-plane")
            save_image(synthesize_swir(img, ccfg), out / (p.stem + ".png"))
        except (ImageFormatError, ValueError, OSError) as exc:
            log.warning("%s: %s", p, exc)
            failures += 1
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_fuse(args, cfg) -> int:
    rc = run_config(args, cfg)
    result = harness.run_fuse(rc)
    print(f"{len(result.reports)} rows -> {rc.output_dir / 'metrics.csv'}")
    return _report(result)


def cmd_metrics(args, cfg) -> int:
    rc = run_config(args, cfg)
    result = harness.score_directory(rc, Path(args.fused), args.method)
    print(f"{len(result.reports)} rows -> {rc.output_dir / 'metrics.csv'}")
    return _report(result)


def cmd_radar(args, cfg) -> int:
    reports = {}
    for item in args.report:
        name, sep, path = item.partition("=")
        if not sep:
            path, name = item, Path(item).parent.name or Path(item).stem
        if name in reports:
            raise ConfigError(f"dataset {name!r} given twice")
        if not Path(path).is_file():
            raise ConfigError(f"report {path} not found")
        reports[name] = path
    table = harness.radar_export(reports, Path(_pick(args, cfg, "out", "out")))
    for flag in table.flags:
        log.warning("%s", flag)
    print(f"{len(table.methods)} methods x {len(table.metrics)} metrics")
    return EXIT_OK


def cmd_bench(args, cfg) -> int:
    rc = run_config(args, cfg)
    size = parse_pair(args.size)
    rows = harness.bench(rc, size, args.reps)
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    harness.write_bench(rows, rc.output_dir / "bench.csv")
    for r in rows:
        params = "" if r.params is None else f" params={r.params}"
        print(f"{r.method:>18s}  {r.width}x{r.height}  median {r.median_ms:.1f} ms  "
              f"p10 {r.p10_ms:.1f}  p90 {r.p90_ms:.1f}  {r.fps:.2f} fps{params}  rss {r.peak_rss_mb:.0f} MB")
    for line in harness.reference_annotations():
        print(line)
    return EXIT_OK


def _branches(name: str):
    try:
        return {"tri": TRIMODAL, "dual": DUAL_BAND}[name]
    except KeyError:
        raise ConfigError(f"--branches must be tri or dual, got {name!r}") from None


def cmd_train(args, cfg) -> int:
    seed = _pick(args, cfg, "seed", 0, int)
    ccfg = _clahe(args, cfg)
    if args.dataset:
        rc = run_config(args, cfg)
        samples, warnings = harness.ingest(rc)
        for w in warnings:
            log.warning("%s %s: %s", w.kind, w.item, w.message)
    else:
        samples = corpus(args.synthetic, (args.size, args.size), seed=seed)
    if not samples:
        raise ConfigError("no training samples")
    tcfg = TrainConfig(epochs=args.epochs, steps=args.steps, batch_size=args.batch, crop=args.crop or None,
                       seed=seed, swir_source="real" if args.real_swir else "synswir")
    mcfg = ModelConfig(channels=args.channels, branches=_branches(args.branches), seed=seed)
    res = train(samples, tcfg, mcfg, ccfg)
    out = Path(args.weights_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(res.params, out)
    print(f"loss {res.step_loss[0]:.6f} -> {res.step_loss[-1]:.6f} over {len(res.step_loss)} steps; "
          f"weights -> {out}")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    seed = _pick(args, cfg, "seed", 0, int)
    sample = with_synswir(corpus(1, (args.size, args.size), seed=seed)[0])
    if args.loss == "recon":
        params = ModelParams.init(ModelConfig(channels=args.channels, seed=seed))
        fn = recon_objective(sample_inputs(sample, TRIMODAL), source_stack(sample, TRIMODAL))
    else:
        params = ModelParams.init(ModelConfig(channels=args.channels, num_classes=3, seed=seed))
        labels = np.random.default_rng(seed).integers(0, 3, (1, args.size, args.size))
        fn = semantic_objective(sample_inputs(sample, TRIMODAL), labels, LossWeights())
    err = grad_check(fn, params, probe_count=args.probes, seed=seed)
    ok = err <= args.tol
    print(f"{args.loss}: max relative error {err:.3e} over {args.probes} probes ({'ok' if ok else 'FAIL'})")
    return EXIT_OK if ok else EXIT_PARTIAL


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file; keys in [run] mirror the long options")
    common.add_argument("--jobs", type=int, help="concurrent work items")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    clahe = argparse.ArgumentParser(add_help=False)
    clahe.add_argument("--tiles", help="tile grid as ROWS,COLS (default 8,8)")
    clahe.add_argument("--clip", type=float, help="clip limit; <= 0 disables clipping (default 2.0)")
    clahe.add_argument("--bins", type=int, help="histogram bins (default 256)")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--dataset", help="directory holding rgb/, thermal/ and optional swir/")
    run.add_argument("--methods", type=lambda s: [m for m in s.split(";") if m],
                     help="semicolon-separated: lp3;gff3;cascade:<cmd>;net-dual;net-tri;net-tri-realswir")
    run.add_argument("--weights", action="append", metavar="METHOD=PATH")
    run.add_argument("--resize", help="W,H or 'none' (default 640,480)")

    p = argparse.ArgumentParser(prog="swirfuse", description="Trimodal RGB/thermal/SynSWIR fusion toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synswir", parents=[common, clahe], help="CLAHE a thermal image or directory")
    s.add_argument("input")
    s.set_defaults(func=cmd_synswir)

    s = sub.add_parser("fuse", parents=[common, clahe, run], help="fuse and score a dataset")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("metrics", parents=[common, clahe, run], help="score existing fused images")
    s.add_argument("--fused", required=True, help="directory of <stem>.png fused images")
    s.add_argument("--method", default="external")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("radar", parents=[common], help="normalize metric CSVs for radar plots")
    s.add_argument("report", nargs="+", help="DATASET=metrics.csv (or a path; dataset = parent dir name)")
    s.set_defaults(func=cmd_radar)

    s = sub.add_parser("bench", parents=[common, run], help="throughput per method")
    s.add_argument("--size", default="640,480")
    s.add_argument("--reps", type=int, default=5)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("train", parents=[common, clahe, run], help="train the fusion network")
    s.add_argument("--synthetic", type=int, default=16, help="synthetic corpus size when --dataset is absent")
    s.add_argument("--size", type=int, default=64, help="synthetic image side")
    s.add_argument("--branches", default="tri")
    s.add_argument("--channels", type=int, default=16)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--steps", type=int)
    s.add_argument("--batch", type=int, default=8)
    s.add_argument("--crop", type=int, default=64, help="random crop side; 0 disables")
    s.add_argument("--real-swir", action="store_true", help="feed the real SWIR plane to the s branch")
    s.add_argument("--weights-out", default="out/weights.tfus")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    s.add_argument("--loss", choices=("recon", "semantic"), default="recon")
    s.add_argument("--probes", type=int, default=50)
    s.add_argument("--size", type=int, default=8)
    s.add_argument("--channels", type=int, default=4)
    s.add_argument("--tol", type=float, default=1e-3)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _read_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
