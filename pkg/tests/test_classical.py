import itertools
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swirfuse.classical import (BaseRule, ExternalOperator, FusionRule, OperatorError, analyze, box_mean,
                                cascade_order_avg, gff_fuse, gff_weights, guided_filter, lp_fuse, pixel_mean,
                                pyr_down, pyr_up, synthesize)
from swirfuse.image import Image


def brute_box(x, r):
    h, w = x.shape
    out = np.empty_like(x)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    acc += x[min(max(i + di, 0), h - 1), min(max(j + dj, 0), w - 1)]
            out[i, j] = acc / (2 * r + 1) ** 2
    return out


@pytest.mark.parametrize("shape", [(64, 64), (65, 63), (17, 40)])
@pytest.mark.parametrize("levels", [1, 2, 3, 4])
def test_perfect_reconstruction(rng, shape, levels):
    x = rng.uniform(0, 255, shape)
    assert np.abs(synthesize(analyze(x, levels)) - x).max() <= 1e-9


def test_band_shapes(rng):
    pyr = analyze(rng.uniform(size=(65, 63)), 3)
    assert [b.shape for b in pyr.levels] == [(65, 63), (33, 32), (17, 16)]
    assert pyr.base.shape == (9, 8)


def test_impulse_detail_band():
    d = np.zeros((9, 9))
    d[4, 4] = 1.0
    band = analyze(d, 1).levels[0]
    # blur + decimation leaves u (x) u with u = [0, 1, 6, 1, 0] / 16 around the impulse;
    # upsampling gives (1 + 36 + 1) / 128 per axis on even sites and (6 + 1) / 32 on odd ones
    even, odd = 38 / 128, 7 / 32
    assert band[4, 4] == pytest.approx(1 - even * even, abs=1e-15)
    assert band[4, 5] == pytest.approx(-even * odd, abs=1e-15)
    assert band[5, 5] == pytest.approx(-odd * odd, abs=1e-15)
    np.testing.assert_allclose(band, d - pyr_up(pyr_down(d), d.shape), atol=0)


def test_too_many_levels():
    with pytest.raises(ValueError):
        analyze(np.zeros((8, 8)), 4)


def test_lp_fuse_idempotent_on_identical_triple(rng):
    x = rng.uniform(0, 255, (40, 52))
    for rule in (FusionRule(), FusionRule(base_rule=BaseRule.LOCAL_ENERGY)):
        assert np.abs(lp_fuse([x, x, x], 3, rule).data - x).max() <= 1e-6


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_lp_fuse_permutation_invariance_exact(seed):
    rng = np.random.default_rng(seed)
    ims = [rng.uniform(0, 255, (24, 20)) for _ in range(3)]
    ref = lp_fuse(ims, 3).data
    for perm in itertools.permutations(range(3)):
        assert np.array_equal(lp_fuse([ims[i] for i in perm], 3).data, ref)


def test_lp_fuse_gathers_disjoint_detail(rng):
    h, w = 64, 64
    left = np.full((h, w), 128.0)
    right = np.full((h, w), 128.0)
    left[:, : w // 2] += rng.uniform(-40, 40, (h, w // 2))
    right[:, w // 2:] += rng.uniform(-40, 40, (h, w - w // 2))
    flat = np.full((h, w), 128.0)
    fused = analyze(lp_fuse([left, right, flat], 3).data, 3)
    for half in (slice(0, w // 2), slice(w // 2, w)):
        e_fused = (fused.levels[0][:, half] ** 2).sum()
        for src in (left, right, flat):
            assert e_fused >= (analyze(src, 3).levels[0][:, half] ** 2).sum() * 0.999


def test_box_mean_matches_brute_force(rng):
    x = rng.uniform(size=(9, 13))
    for r in (1, 2, 4):
        np.testing.assert_allclose(box_mean(x, r), brute_box(x, r), atol=1e-12)


def test_guided_filter_limits(rng):
    x = rng.uniform(size=(20, 20))
    # huge eps: a -> 0, output -> box(box(p))
    np.testing.assert_allclose(guided_filter(x, x, 2, 1e12), box_mean(box_mean(x, 2), 2), atol=1e-9)
    # tiny eps with guide = input reproduces the input
    np.testing.assert_allclose(guided_filter(x, x, 2, 1e-12), x, atol=1e-5)
    with pytest.raises(ValueError):
        guided_filter(x, x[:5], 2, 0.1)


def test_gff_identical_inputs(rng):
    x = Image(rng.uniform(0, 255, (48, 48)))
    assert np.abs(gff_fuse([x, x, x]).data - x.data).max() <= 1e-4


def test_gff_weights_sum_to_one(rng):
    ims = [Image(rng.uniform(0, 255, (40, 40))) for _ in range(3)]
    wb, wd = gff_weights(ims)
    np.testing.assert_allclose(wb.sum(axis=0), 1.0)
    np.testing.assert_allclose(wd.sum(axis=0), 1.0)
    assert wb.min() >= 0 and wd.min() >= 0


def test_gff_constant_input_gets_little_detail_weight(rng):
    tex = [Image(128 + rng.uniform(-60, 60, (48, 48))) for _ in range(2)]
    const = Image(np.full((48, 48), 100.0))
    _, wd = gff_weights([const] + tex)
    assert wd[0].mean() < 0.05


def test_cascade_mean_closed_form(rng):
    a, b, c = (Image(rng.uniform(0, 255, (8, 9))) for _ in range(3))
    out = cascade_order_avg(pixel_mean, a, b, c)
    np.testing.assert_allclose(out.data, (a.data + b.data + c.data) / 3, atol=1e-9)
    single = cascade_order_avg(pixel_mean, a, b, c, order_avg=False)
    np.testing.assert_allclose(single.data, (a.data + b.data + 2 * c.data) / 4)


def test_cascade_jobs_match_serial(rng):
    ims = [Image(rng.uniform(0, 255, (16, 16))) for _ in range(3)]
    op = lambda x, y: lp_fuse([x, y], 2)  # noqa: E731
    assert np.array_equal(cascade_order_avg(op, *ims, jobs=3).data, cascade_order_avg(op, *ims).data)


def test_cascade_reports_operator_failure(rng):
    def bad(x, y):
        raise RuntimeError("boom")

    with pytest.raises(OperatorError):
        cascade_order_avg(bad, *(Image(np.zeros((4, 4))) for _ in range(3)))


def test_external_operator(tmp_path, rng):
    script = tmp_path / "mean.py"
    script.write_text(
        "import sys\n"
        "from swirfuse.image import load_image, save_image, Image\n"
        "a, b, out = sys.argv[1:]\n"
        "x, y = load_image(a), load_image(b)\n"
        "save_image(Image((x.data + y.data) / 2), out)\n")
    op = ExternalOperator(f"{sys.executable} {script} {{a}} {{b}} {{out}}")
    a = Image(rng.integers(0, 256, (6, 7)).astype(float))
    b = Image(rng.integers(0, 256, (6, 7)).astype(float))
    np.testing.assert_allclose(op(a, b).data, (a.data + b.data) / 2, atol=0.5)
    with pytest.raises(ValueError):
        ExternalOperator("echo {a}")
    with pytest.raises(OperatorError):
        ExternalOperator(f"{sys.executable} -c 'raise SystemExit(3)' {{a}} {{b}} {{out}}")(a, b)
