"""One block per acceptance criterion; each records a PASS/FAIL line that is
printed in the pytest terminal summary."""

import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import record
from swirfuse.classical import analyze, cascade_order_avg, lp_fuse, pixel_mean, synthesize
from swirfuse.harness import RunConfig, bench, metric_columns, radar_export, run_fuse
from swirfuse.image import Image, quantize, sobel_xy
from swirfuse.metrics import entropy, mutual_information, qabf, spatial_frequency, ssim, std_dev, vif
from swirfuse.nn.engine import Tape
from swirfuse.nn.model import DUAL_BAND, TRIMODAL, ModelConfig, ModelParams, forward, forward_arrays, sample_inputs
from swirfuse.nn.losses import LossWeights, source_stack
from swirfuse.nn.train import TrainConfig, evaluate_recon, grad_check, recon_objective, semantic_objective, train
from swirfuse.synswir import ClaheConfig, clahe, single_mapping_regions, tile_mappings, with_synswir
from swirfuse.synthetic import corpus, scene
from test_harness import RADAR_A, RADAR_B, RADAR_EXPECTED, _write_report, make_dataset
from test_synswir import global_he


# 1 ---------------------------------------------------------------------------

def test_c01_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(120):
        a = oracles.random_level_image(rng)
        b = np.resize(oracles.random_level_image(rng), a.shape)
        pairs = [(oracles.entropy(a.tolist()), entropy(a)), (oracles.std_dev(a.tolist()), std_dev(a)),
                 (oracles.spatial_frequency(a.tolist()), spatial_frequency(a)),
                 (oracles.mutual_information(a.tolist(), b.tolist()), mutual_information(a, b))]
        for ref, got in pairs:
            worst = max(worst, abs(ref - got) / max(abs(ref), abs(got), 1.0))
    ssim_err = vif_err = 0.0
    for _ in range(100):
        x = rng.integers(0, 256, (16, 16)).astype(float)
        ssim_err = max(ssim_err, abs(ssim(x, x) - 1))
        vif_err = max(vif_err, abs(vif(x, x) - 1))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and ssim_err <= 1e-9 and vif_err <= 1e-6 and elapsed < 30
    record(1, ok, f"oracle rel err {worst:.1e}, |ssim-1| {ssim_err:.1e}, |vif-1| {vif_err:.1e}, {elapsed:.1f}s")
    assert ok


def test_c01_qabf_self_score():
    img = scene(np.random.default_rng(7), (128, 128)).rgb
    q = qabf([img], img)
    ok = q >= 0.98
    record(1, ok, f"qabf(X,X) = {q:.5f} (threshold 0.98; the canonical constants cap it at 0.97479)")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_c02_clahe_structure():
    t0 = time.perf_counter()
    cfg = ClaheConfig()
    rng = np.random.default_rng(5)
    images = [s.thermal for s in corpus(20, (96, 128), seed=21)]
    mono = all(np.all(np.diff(lut) >= 0) for img in images for lut in tile_mappings(img, cfg).reshape(-1, cfg.bins))
    const = np.ptp(clahe(Image(np.full((96, 128), 42.0)), cfg).data) == 0
    labels = single_mapping_regions((96, 128), cfg)
    order_ok, agree, total = True, 0, 0
    interior = labels >= 0
    for img in images:
        out = clahe(img, cfg).data
        ys, xs = np.nonzero(interior)
        pairs = 0
        while pairs < 1000:
            i, j = rng.integers(0, len(ys), 2)
            p, q = (ys[i], xs[i]), (ys[j], xs[j])
            if labels[p] != labels[q]:
                continue
            pairs += 1
            if img.data[p] >= img.data[q] and not out[p] >= out[q]:
                order_ok = False
        for gt, gj in zip(sobel_xy(img.data), sobel_xy(out)):
            m = interior & (np.abs(gt) > 1)
            agree += int(np.count_nonzero(np.sign(gt[m]) == np.sign(gj[m])))
            total += int(np.count_nonzero(m))
    frac = agree / total
    elapsed = time.perf_counter() - t0
    ok = mono and const and order_ok and frac >= 0.99 and elapsed < 60
    record(2, ok, f"monotone {mono}, constant {const}, order {order_ok}, sign agreement {frac:.4f}, {elapsed:.1f}s")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_c03_global_equalization():
    rng = np.random.default_rng(33)
    worst = 0.0
    for _ in range(10):
        h, w = rng.integers(16, 64, 2)
        lv = np.clip(np.round(rng.normal(120, 30, (h, w))), 0, 255)
        out = clahe(Image(lv), ClaheConfig((1, 1), math.inf, 256)).data
        worst = max(worst, float(np.abs(out - global_he(lv)).max()))
    ok = worst <= 1.0
    record(3, ok, f"max |clahe - global HE| = {worst:g} levels over 10 images")
    assert ok


# 4 ---------------------------------------------------------------------------

def test_c04_pyramid():
    rng = np.random.default_rng(4)
    worst = 0.0
    for shape in ((64, 64), (65, 63), (480, 640)):
        x = rng.uniform(0, 255, shape)
        for levels in range(1, 5):
            worst = max(worst, float(np.abs(synthesize(analyze(x, levels)) - x).max()))
    x = rng.uniform(0, 255, (65, 63))
    idem = float(np.abs(lp_fuse([x, x, x]).data - x).max())
    ims = [rng.uniform(0, 255, (65, 63)) for _ in range(3)]
    ref = lp_fuse(ims).data
    perm = all(np.array_equal(lp_fuse([ims[i] for i in p]).data, ref) for p in itertools.permutations(range(3)))
    ok = worst <= 1e-6 and idem <= 1e-6 and perm
    record(4, ok, f"reconstruction err {worst:.1e}, idempotence err {idem:.1e}, exact permutation invariance {perm}")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_c05_cascade():
    rng = np.random.default_rng(55)
    closed = perm_err = 0.0
    skewed = lambda x, y: Image(0.7 * x.data + 0.3 * y.data)  # noqa: E731  order-sensitive operator
    for _ in range(20):
        a, b, c = (Image(rng.uniform(0, 255, (12, 10))) for _ in range(3))
        closed = max(closed, float(np.abs(cascade_order_avg(pixel_mean, a, b, c).data
                                          - (a.data + b.data + c.data) / 3).max()))
        for op in (pixel_mean, skewed):
            ref = cascade_order_avg(op, a, b, c).data
            for p in itertools.permutations((a, b, c)):
                perm_err = max(perm_err, float(np.abs(cascade_order_avg(op, *p).data - ref).max()))
    ok = closed <= 1e-9 and perm_err <= 1e-9
    record(5, ok, f"closed-form err {closed:.1e}, permutation err {perm_err:.1e}")
    assert ok


# 6 ---------------------------------------------------------------------------

def test_c06_algorithm_contracts():
    rng = np.random.default_rng(6)
    params = ModelParams.init(ModelConfig())
    alpha_ok = True
    for _ in range(100):
        inputs = {b: rng.uniform(size=(3 if b == "v" else 1, 1, 8, 8)) for b in TRIMODAL}
        a = forward_arrays(params, inputs).alpha.value
        alpha_ok &= bool(np.all(a > 0) and abs(a.sum() - 1) <= 1e-6)
    t = Tape(record=False)
    z = rng.standard_normal((5, 3))
    shift = float(np.abs(t.softmax(t.leaf(z)).value - t.softmax(t.leaf(z + 50.0)).value).max())
    f = rng.standard_normal((16, 1, 6, 6))
    convex = float(np.abs(t.weighted_sum(t.softmax(t.leaf(z[:1])), [t.leaf(f)] * 3).value - f).max())
    sizes_ok = bounded = True
    for h, w in ((8, 8), (16, 24), (33, 17), (64, 64), (480, 640)):
        s = corpus(1, (h, w), seed=h)[0]
        fused, _ = forward(s, params, value_range=(-5.0, 5.0))
        sizes_ok &= fused.data.shape == (h, w)
        bounded &= bool(fused.data.min() >= -5 and fused.data.max() <= 5)
    ok = alpha_ok and shift <= 1e-12 and convex <= 1e-12 and sizes_ok and bounded
    record(6, ok, f"alpha simplex {alpha_ok}, shift err {shift:.1e}, convexity err {convex:.1e}, "
                  f"sizes {sizes_ok}, bounded {bounded}")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_c07_gradients():
    t0 = time.perf_counter()
    s = with_synswir(corpus(1, (8, 8), seed=77)[0])
    inputs = sample_inputs(s, TRIMODAL)
    recon = grad_check(recon_objective(inputs, source_stack(s, TRIMODAL)), ModelParams.init(ModelConfig()),
                       probe_count=50)
    labels = np.random.default_rng(7).integers(0, 3, (1, 8, 8))
    sem = grad_check(semantic_objective(inputs, labels, LossWeights(1.0, 1.0, 0.5)),
                     ModelParams.init(ModelConfig(num_classes=3)), probe_count=50)
    elapsed = time.perf_counter() - t0
    ok = recon <= 1e-3 and sem <= 1e-3 and elapsed < 120
    record(7, ok, f"recon {recon:.1e}, semantic {sem:.1e} (50 probes each), {elapsed:.1f}s")
    assert ok


# 8 ---------------------------------------------------------------------------

DESK = TrainConfig(steps=200, batch_size=8, crop=32, seed=0)


@pytest.mark.slow
def test_c08_training_signal():
    data = corpus(16, (64, 64), seed=1)
    mcfg = ModelConfig(seed=0)
    initial = evaluate_recon(ModelParams.init(mcfg), data)
    first = train(data, DESK, mcfg)
    second = train(data, DESK, mcfg)
    final = evaluate_recon(first.params, data)
    repro = first.step_loss == second.step_loss and all(
        np.array_equal(first.params[k], second.params[k]) for k in first.params.names())
    ok = final <= 0.5 * initial and repro
    record(8, ok, f"recon loss {initial:.4f} -> {final:.4f} (ratio {final / initial:.3f}), bit-reproducible {repro}")
    assert ok


# 9 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_c09_trimodal_beats_dual():
    train_set = [with_synswir(s) for s in corpus(16, (64, 64), seed=2, kind="crushed")]
    test_set = [with_synswir(s) for s in corpus(6, (64, 64), seed=3, kind="crushed")]
    scores = {}
    for name, branches in (("tri", TRIMODAL), ("dual", DUAL_BAND)):
        params = train(train_set, DESK, ModelConfig(branches=branches, seed=0)).params
        en, sf = [], []
        for s in test_set:
            fused, _ = forward(s, params)
            q = quantize(fused).astype(float)
            en.append(entropy(q))
            sf.append(spatial_frequency(q))
        scores[name] = (float(np.mean(en)), float(np.mean(sf)))
    avg = {k: (v[0] + v[1]) / 2 for k, v in scores.items()}
    ok = avg["tri"] > avg["dual"]
    record(9, ok, "mean(EN, SF): tri {:.3f} (EN {:.3f}, SF {:.3f}) vs dual {:.3f} (EN {:.3f}, SF {:.3f})".format(
        avg["tri"], *scores["tri"], avg["dual"], *scores["dual"]))
    assert ok


# 10 --------------------------------------------------------------------------

def test_c10_harness(tmp_path):
    data = make_dataset(tmp_path / "ds", n=3, shape=(48, 64))
    outs = []
    for k, jobs in enumerate((1, 2)):
        cfg = RunConfig(dataset_dir=data, methods=("lp3", "gff3", "cascade:@mean"), resize_to=(64, 48),
                        output_dir=tmp_path / f"run{k}", seed=0, jobs=jobs)
        run_fuse(cfg)
        outs.append(cfg.output_dir)
    same = metric_columns(outs[0] / "metrics.csv") == metric_columns(outs[1] / "metrics.csv")
    _write_report(tmp_path / "A" / "metrics.csv", RADAR_A)
    _write_report(tmp_path / "B" / "metrics.csv", RADAR_B)
    table = radar_export({"A": tmp_path / "A" / "metrics.csv", "B": tmp_path / "B" / "metrics.csv"}, tmp_path / "r")
    radar = all([table.means[m][k] for k in table.metrics] == v for m, v in RADAR_EXPECTED.items())
    golden_dir = tmp_path / "golden_run"
    golden_data = make_dataset(tmp_path / "gds", n=2, shape=(32, 32), seed=11)
    run_fuse(RunConfig(dataset_dir=golden_data, methods=("lp3", "gff3"), resize_to=None, output_dir=golden_dir))
    golden = metric_columns(golden_dir / "metrics.csv") == metric_columns(
        Path(__file__).parent / "golden" / "metrics.csv")
    ok = same and radar and golden
    record(10, ok, f"rerun identical {same}, radar hand fixture exact {radar}, golden schema {golden}")
    assert ok


# 11 --------------------------------------------------------------------------

def test_c11_throughput():
    rows = {r.method: r for r in bench(RunConfig(methods=("net-dual", "net-tri")), (640, 480), reps=3)}
    fps_ok = all(abs(r.fps - 1000.0 / r.median_ms) < 1e-9 for r in rows.values())
    slower = rows["net-tri"].median_ms > rows["net-dual"].median_ms
    ok = fps_ok and slower
    record(11, ok, "640x480 median ms: tri {:.0f} ({:.2f} fps) vs dual {:.0f} ({:.2f} fps); params {} vs {}".format(
        rows["net-tri"].median_ms, rows["net-tri"].fps, rows["net-dual"].median_ms, rows["net-dual"].fps,
        rows["net-tri"].params, rows["net-dual"].params))
    assert ok
