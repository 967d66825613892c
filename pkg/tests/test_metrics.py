import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

import oracles
from swirfuse.image import Image, Sample
from swirfuse.metrics import (PER_SOURCE_COLUMNS, QABF_A, QABF_G, REPORT_COLUMNS, HistogramPair, entropy,
                              fusion_mutual_information, mutual_information, qabf, score_fused, score_planes,
                              spatial_frequency, ssim, std_dev, vif, write_reports)
from swirfuse.synthetic import corpus


@pytest.mark.parametrize("seed", range(25))
def test_oracle_equivalence(seed):
    rng = np.random.default_rng(seed)
    a = oracles.random_level_image(rng)
    b = oracles.random_level_image(rng)[: a.shape[0], : a.shape[1]]
    b = np.resize(b, a.shape)
    for fn in ("entropy", "std_dev", "spatial_frequency"):
        assert oracles.rel_close(getattr(oracles, fn)(a.tolist()), globals()[fn](a))
    assert oracles.rel_close(oracles.mutual_information(a.tolist(), b.tolist()), mutual_information(a, b))


def test_hand_examples():
    a, b = np.array([[0.0, 255.0]]), np.array([[255.0, 0.0]])
    assert mutual_information(a, b) == pytest.approx(1.0)
    assert fusion_mutual_information(a, b, a) == pytest.approx(2.0)
    assert std_dev(np.array([[0.0, 1, 2, 3]])) == pytest.approx(1.1180, abs=1e-4)
    assert spatial_frequency(np.array([[0.0, 1], [0, 1]])) == pytest.approx(1.0)
    assert entropy(np.full((4, 4), 9.0)) == 0.0


def test_histogram_pair_marginals(rng):
    a, b = rng.integers(0, 256, (9, 9)), rng.integers(0, 256, (9, 9))
    hp = HistogramPair.of(a.astype(float), b.astype(float))
    assert hp.joint.sum() == 81
    np.testing.assert_array_equal(hp.marginal_a, hp.joint.sum(axis=1))
    np.testing.assert_array_equal(hp.marginal_b, hp.joint.sum(axis=0))


def test_fmi_of_triple_identity_is_twice_entropy(rng):
    a = rng.integers(0, 256, (12, 12)).astype(float)
    assert fusion_mutual_information(a, a, a) == pytest.approx(2 * entropy(a))
    assert fusion_mutual_information(a, a, np.zeros_like(a)) == 0.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (12, 12), elements=st.integers(0, 255).map(float)),
       arrays(np.float64, (12, 12), elements=st.integers(0, 255).map(float)))
def test_symmetry_and_ranges(a, b):
    assert mutual_information(a, b) == pytest.approx(mutual_information(b, a), abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert 0 <= mutual_information(a, b) <= min(entropy(a), entropy(b)) + 1e-9
    assert -1 <= ssim(a, b) <= 1
    q = qabf([a], b, warn=False)
    assert q is None or 0 <= q <= 1


def test_mi_shuffle_data_processing(rng):
    base = rng.integers(0, 8, (16, 16)).astype(float) * 30
    noisy = base + rng.integers(0, 2, base.shape) * 30
    ref = mutual_information(base, noisy)
    wins = sum(mutual_information(base, rng.permutation(noisy.ravel()).reshape(base.shape)) <= ref
               for _ in range(40))
    assert wins >= 38


def test_ssim_examples(rng):
    x = rng.uniform(0, 255, (16, 16))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)
    assert ssim(np.zeros((16, 16)), np.full((16, 16), 255.0)) == pytest.approx(6.5025 / (255 ** 2 + 6.5025))
    patch = rng.uniform(-50, 50, (16, 16))
    patch -= patch.mean()
    assert ssim(128 + patch, 128 - patch) < 0


def test_qabf_self_score_matches_sigmoid_product(small_corpus):
    img = small_corpus[0].thermal
    tg, kg, sg = QABF_G
    ta, ka, sa = QABF_A
    expected = tg / (1 + np.exp(kg * (1 - sg))) * ta / (1 + np.exp(ka * (1 - sa)))
    assert qabf([img], img) == pytest.approx(expected, abs=1e-12)
    assert qabf([img, img], img) == pytest.approx(expected, abs=1e-12)


def test_qabf_undefined_on_flat_inputs():
    flat = np.full((16, 16), 40.0)
    assert qabf([flat, flat], flat, warn=False) is None


def test_qabf_three_sources_is_mean_of_pairs(small_corpus):
    s = small_corpus[1]
    planes = [s.rgb, s.thermal, Image(255 - s.thermal.data)]
    f = s.thermal
    pairs = [qabf([planes[i], planes[j]], f) for i, j in ((0, 1), (0, 2), (1, 2))]
    assert qabf(planes, f) == pytest.approx(np.mean(pairs))


def test_vif_examples(rng):
    ref = ndimage.gaussian_filter(rng.uniform(0, 255, (64, 64)), 1.0)
    assert vif(ref, ref) == pytest.approx(1.0, abs=1e-6)
    assert vif(ref, ndimage.gaussian_filter(ref, 3.0)) < 1.0
    mid = ref.mean()
    amplified = np.clip(mid + 1.5 * (ref - mid), 0, 255)
    assert vif(ref, amplified) > 1.0


def _fused_sample():
    s = corpus(1, (32, 32), seed=8)[0]
    return s, s.thermal


def test_score_fused_identity_single_source():
    s, f = _fused_sample()
    rep = score_fused(s, f, sources=("thermal",))
    assert rep.ssim == pytest.approx(1.0, abs=1e-9)
    assert rep.vif == pytest.approx(1.0, abs=1e-6)
    assert rep.mi == pytest.approx(entropy(s.thermal))


def test_score_fused_means_and_duplicates():
    s, f = _fused_sample()
    s = Sample(s.rgb, s.thermal, syn_swir=Image(255 - s.thermal.data), id=s.id)
    rep = score_fused(s, f)
    for k in ("mi", "vif", "qabf", "ssim"):
        hand = sum(v[k] for v in rep.per_source.values()) / 3
        assert getattr(rep, k) == pytest.approx(hand, abs=1e-12)
    assert rep.fmi == pytest.approx(sum(v["mi"] for v in rep.per_source.values()))
    dup = score_planes({"a": s.thermal, "b": s.thermal}, f)
    one = score_planes({"a": s.thermal}, f)
    for k in ("mi", "vif", "qabf", "ssim"):
        assert getattr(dup, k) == pytest.approx(getattr(one, k))


def test_flat_source_warns_and_reports_zero():
    f = Image(np.random.default_rng(0).uniform(0, 255, (16, 16)))
    rep = score_planes({"flat": Image(np.full((16, 16), 3.0))}, f)
    assert rep.qabf == 0.0 and rep.warnings


def test_report_ranges(small_corpus):
    s = small_corpus[2]
    rep = score_fused(s, s.thermal, sources=("rgb", "thermal"))
    assert rep.en >= 0 and rep.sd >= 0 and rep.sf >= 0 and rep.mi >= 0 and rep.vif >= 0
    assert 0 <= rep.qabf <= 1 and -1 <= rep.ssim <= 1


def test_no_sources_is_an_error():
    with pytest.raises(ValueError):
        score_planes({}, Image(np.zeros((16, 16))))


def test_write_reports_schema(tmp_path, small_corpus):
    s = small_corpus[0]
    rep = score_fused(s, s.thermal, sources=("rgb", "thermal"), method="m", wall_time=0.5)
    write_reports([rep], tmp_path / "m.csv", tmp_path / "p.csv")
    with open(tmp_path / "m.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == REPORT_COLUMNS and rows[1][-1] == "500.000"
    with open(tmp_path / "p.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == PER_SOURCE_COLUMNS and [r[2] for r in rows[1:]] == ["rgb", "thermal"]


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        mutual_information(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))
