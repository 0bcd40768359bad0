import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

import oracles
from markplugger.errors import EmptyInput, SampleTooSmall, ShapeMismatch
from markplugger.metrics import (PSNR_CAP, EvalReport, FeatureStats, ImageTooSmall, delta_fid_from_scores,
                                 evaluate_batch, fid_delta, fid_from_features, frechet_distance,
                                 normalized_correlation, psnr, ssim)
from markplugger.payload import MetadataRecord, binarize, character_edit_ratio, payload_text, render_payload

META = MetadataRecord("a blue square", 5, "2025-02-03 04:05:06")


def rand_img(seed, size=24):
    return np.random.default_rng(seed).random((size, size, 3))


def test_psnr_examples():
    x = rand_img(0)
    assert psnr(x, x) == PSNR_CAP
    y = x + 0.1
    assert psnr(x, y) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.zeros(4), np.ones(4)) == 0.0
    with pytest.raises(ShapeMismatch):
        psnr(x, x[:5])


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.5), st.floats(1.1, 3.0))
def test_psnr_decreases_with_mse(seed, scale, factor):
    rng = np.random.default_rng(seed)
    x = rng.random((16, 16, 3))
    n = rng.normal(size=x.shape)
    assert psnr(x, x + scale * factor * n) < psnr(x, x + scale * n)


def test_ssim_examples():
    x = rand_img(1)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    c = np.full((32, 32), 0.25)
    # constant patches: only the luminance term survives
    mu1, mu2, c1 = 0.25, 0.75, 1e-4
    lum = (2 * mu1 * mu2 + c1) / (mu1 ** 2 + mu2 ** 2 + c1)
    assert ssim(c, c + 0.5) == pytest.approx(lum, abs=1e-9)
    b = (np.random.default_rng(2).random((32, 32)) < 0.5).astype(float)
    assert ssim(b, 1 - b) < 0
    with pytest.raises(ImageTooSmall):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ShapeMismatch):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ssim_symmetric_and_matches_oracles(seed):
    x, y = rand_img(seed, 20), rand_img(seed + 1, 20)
    s = ssim(x, y)
    assert s == pytest.approx(ssim(y, x), abs=1e-9)
    assert s == pytest.approx(oracles.ssim(x, y), abs=1e-6)
    gx, gy = oracles.gray(x), oracles.gray(y)
    ref = structural_similarity(gx, gy, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert s == pytest.approx(ref, abs=1e-6)


def test_nc_examples():
    w = binarize(render_payload(META))
    assert normalized_correlation(w, w) == pytest.approx(1.0, abs=1e-12)
    a, b = np.zeros((4, 4)), np.zeros((4, 4))
    a[:2], b[2:] = 1, 1
    assert normalized_correlation(a, b) == 0.0
    half = np.zeros((4, 4))
    half[1:3] = 1
    assert normalized_correlation(a, half) == pytest.approx(0.5, abs=1e-12)
    assert normalized_correlation(a, np.zeros((4, 4))) == 0.0
    with pytest.raises(ShapeMismatch):
        normalized_correlation(a, np.zeros(3))


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_nc_scale_invariant_and_matches_oracle(seed, c):
    rng = np.random.default_rng(seed)
    w = (rng.random((16, 16)) < 0.3).astype(float)
    v = rng.random((16, 16))
    assert normalized_correlation(w, c * v) == pytest.approx(normalized_correlation(w, v), abs=1e-9)
    assert normalized_correlation(w, v) == pytest.approx(oracles.nc(w, v), abs=1e-9)


def test_fid_worked_example():
    delta, p = delta_fid_from_scores(26.63, 25.28)
    assert delta == pytest.approx(-1.35, abs=1e-9)
    assert round(p, 2) == 5.07


def test_frechet_distance_closed_forms():
    rng = np.random.default_rng(3)
    mu, cov = rng.normal(size=5), np.diag(rng.random(5) + 0.1)
    assert frechet_distance(mu, cov, mu, cov) == pytest.approx(0.0, abs=1e-9)
    v1, v2 = rng.random(5) + 0.1, rng.random(5) + 0.1
    m2 = rng.normal(size=5)
    got = frechet_distance(mu, np.diag(v1), m2, np.diag(v2))
    assert got == pytest.approx(oracles.frechet_diag(mu, v1, m2, v2), rel=1e-9)


def test_feature_stats_merge_is_associative():
    rng = np.random.default_rng(4)
    parts = [rng.normal(size=(n, 6)) for n in (5, 9, 13)]
    whole = FeatureStats(6).update(np.concatenate(parts))
    a, b, c = (FeatureStats(6).update(p) for p in parts)
    for merged in (a.merge(b).merge(c), a.merge(b.merge(c))):
        np.testing.assert_allclose(merged.mean_cov()[0], whole.mean_cov()[0], atol=1e-12)
        np.testing.assert_allclose(merged.mean_cov()[1], whole.mean_cov()[1], atol=1e-12)
    np.testing.assert_allclose(whole.mean_cov()[1], np.cov(np.concatenate(parts).T), atol=1e-12)


def test_fid_delta_identity_and_floor():
    rng = np.random.default_rng(5)
    imgs = [rng.random((8, 8, 3)) for _ in range(70)]
    ref = [rng.random((8, 8, 3)) for _ in range(70)]

    def feat(images):
        return np.stack([np.concatenate([im.mean((0, 1)), im.std((0, 1))]) for im in images])

    with pytest.warns(UserWarning, match="indicative"):
        assert fid_delta(imgs, imgs, ref, features=feat) == (0.0, 0.0)
    with pytest.raises(SampleTooSmall):
        fid_delta(imgs[:10], imgs[:10], ref[:10], features=feat)
    assert fid_from_features(feat(imgs), feat(imgs)) == pytest.approx(0.0, abs=1e-9)


def perfect_pairs(n):
    out = []
    for i in range(n):
        img = rand_img(i, 32)
        meta = MetadataRecord(f"sample {i}", i % 10, "2025-01-01 00:00:00")
        w = render_payload(meta)
        out.append((img, img, w, meta, w.astype(float)))
    return out


def test_evaluate_batch_perfect():
    report, results = evaluate_batch(perfect_pairs(3), extract=None)
    assert report.psnr_db == PSNR_CAP
    assert report.ssim_pct == pytest.approx(100.0)
    assert report.nc_pct == pytest.approx(100.0)
    assert report.ca == 0 and report.cer_pct == 0
    assert report.uid_acc_pct == 100.0
    assert report.sample_count == 3 and not report.failures


def test_evaluate_batch_matches_per_metric_oracles():
    rng = np.random.default_rng(6)
    img = rand_img(7, 32)
    wm = np.clip(img + rng.normal(0, 0.02, img.shape), 0, 1)
    w = render_payload(META)
    wp = w.astype(float).copy()
    wp[:16, :48] = 1 - wp[:16, :48]  # damage the first three cells
    report, (res,) = evaluate_batch([(img, wm, w, META, wp)], extract=None)
    assert report.psnr_db == pytest.approx(oracles.psnr(img, wm), abs=1e-9)
    assert report.ssim_pct == pytest.approx(100 * oracles.ssim(img, wm), abs=1e-4)
    assert report.nc_pct == pytest.approx(100 * oracles.nc(w, binarize(wp)), abs=1e-7)
    truth, _ = payload_text(META)
    assert res.ca == oracles.lev(res.decoded, truth)
    assert report.cer_pct == pytest.approx(oracles.cer([(res.ca, len(truth))]), abs=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=1, max_size=5))
def test_cer_through_batch_equals_formula(flip_cells):
    pairs = []
    for i, cell in enumerate(flip_cells):
        img = rand_img(i, 16)
        meta = MetadataRecord(f"p{i}", i % 10, "2025-01-01 00:00:00")
        w = render_payload(meta)
        wp = w.astype(float).copy()
        r, c = divmod(cell, 16)
        wp[r * 16:(r + 1) * 16, c * 16:(c + 1) * 16] = 1 - wp[r * 16:(r + 1) * 16, c * 16:(c + 1) * 16]
        pairs.append((img, img, w, meta, wp))
    report, results = evaluate_batch(pairs, extract=None)
    assert report.cer_pct == character_edit_ratio([(r.ca, r.n_chars) for r in results])
    assert report.cer_pct == pytest.approx(oracles.cer([(r.ca, r.n_chars) for r in results]), abs=1e-9)


def test_evaluate_batch_empty_extraction_and_failures():
    img = rand_img(8, 16)
    w = render_payload(META)
    bad = (img, img[:8], w, META, w)
    report, _ = evaluate_batch([(img, img, w, META, np.zeros((256, 256, 1))), bad], extract=None)
    assert report.nc_pct == 0.0
    assert report.sample_count == 1
    assert report.failures and report.failures[0]["index"] == 1
    with pytest.raises(EmptyInput):
        evaluate_batch([], extract=None)
    with pytest.raises(EmptyInput):
        evaluate_batch([bad], extract=None)


def test_evaluate_batch_uses_extractor_and_generators():
    w = render_payload(META).astype(float)
    gen = ((rand_img(i, 16), rand_img(i, 16), None, META) for i in range(2))
    report, _ = evaluate_batch(gen, extract=lambda img: w)
    assert report.nc_pct == pytest.approx(100.0)


def test_report_optional_fid_fields():
    r = EvalReport(40.0, 99.0, 0.01, 95.0, 2.0, 3.0, 10)
    assert "delta_fid" not in r.to_dict()
    r.delta_fid, r.p_delta_fid_pct = -1.0, 4.0
    assert r.to_dict()["delta_fid"] == -1.0
