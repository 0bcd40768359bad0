import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from markplugger.backend import StubDiffusionBackend, make_backend
from markplugger.errors import GeometryMismatch
from markplugger.metrics import PSNR_CAP
from markplugger.nets import FusionConfig, WatermarkNets
from markplugger.payload import MetadataRecord, render_payload
from markplugger.pipeline import (GenerationManifest, LatentSample, alpha_sweep, calibrate_threshold,
                                  channel_ablation, evaluate_latents, false_positive_rate, generate_native,
                                  generate_watermarked, latents_from_prompts, load_image, quantize8, random_meta,
                                  save_image, verify_image)

TS = "2025-03-04 05:06:07"


@pytest.fixture(scope="module")
def backend():
    return make_backend("stub-v1")


@pytest.fixture(scope="module")
def nets():
    torch.manual_seed(0)
    n = WatermarkNets()
    with torch.no_grad():
        for p in n.enc.parameters():
            p.normal_(0, 0.05)  # non-zero residual so fusion visibly changes the latent
    return n.eval()


class EchoNets:
    """Extractor double that returns a fixed watermark whatever the image."""

    def __init__(self, w):
        self.w = torch.as_tensor(np.asarray(w, dtype=np.float32)).permute(2, 0, 1)[None]

    def extract(self, x):
        return self.w.expand(x.shape[0], -1, -1, -1)


def test_zero_alpha_is_native_generation(backend, nets):
    img, m = generate_watermarked("a red circle", 3, backend, nets, FusionConfig(0.0, 3), seed=4, steps=5,
                                  timestamp=TS)
    assert np.array_equal(img, generate_native("a red circle", backend, seed=4, steps=5))
    assert m.fusion == {"alpha": 0.0, "kappa": 3}


def test_fresh_encoder_leaves_image_untouched(backend):
    img, _ = generate_watermarked("x", 0, backend, WatermarkNets(), seed=1, steps=3, timestamp=TS)
    assert np.array_equal(img, generate_native("x", backend, seed=1, steps=3))


def test_generation_is_seeded_and_leaves_backend_alone(backend, nets):
    before = backend.weight_hash()
    a, ma = generate_watermarked("a tree", 7, backend, nets, seed=11, steps=4, timestamp=TS)
    b, mb = generate_watermarked("a tree", 7, backend, nets, seed=11, steps=4, timestamp=TS)
    c, _ = generate_watermarked("a tree", 7, backend, nets, seed=12, steps=4, timestamp=TS)
    assert np.array_equal(a, b) and ma == mb
    assert not np.array_equal(a, c)
    assert a.shape == (512, 512, 3) and a.dtype == np.float32
    assert 0.0 <= a.min() and a.max() <= 1.0
    assert not np.array_equal(a, generate_native("a tree", backend, seed=11, steps=4))
    assert backend.weight_hash() == before == ma.backend_hash


def test_only_the_carrier_channel_moves(backend, nets):
    prompt, seed = "channel check", 2
    z = backend.denoise_to_latent(prompt, steps=3, seed=seed)
    seen = {}

    def spy(zw):
        seen["zw"] = zw
        return backend.ae.decode(zw)

    class Spy:
        identifier, latent_shape = backend.identifier, backend.latent_shape
        denoise_to_latent = staticmethod(backend.denoise_to_latent)
        weight_hash = staticmethod(backend.weight_hash)
        decode_latent = staticmethod(spy)

    generate_watermarked(prompt, 1, Spy(), nets, FusionConfig(0.05, 1), seed=seed, steps=3, timestamp=TS)
    diff = (seen["zw"] - z).abs().amax(dim=(0, 2, 3))
    assert diff[1] > 0 and diff[0] == diff[2] == diff[3] == 0


def test_files_and_manifest_round_trip(backend, nets, tmp_path):
    img, m = generate_watermarked("files", 5, backend, nets, seed=9, steps=3, timestamp=TS, out_dir=tmp_path,
                                  ckpt_hash="abc")
    assert m.output_image == "wm_9_5.png"
    assert (tmp_path / "wm_9_5.png").is_file()
    again = GenerationManifest.load(tmp_path / "wm_9_5.json")
    assert again == m
    assert again.meta() == MetadataRecord("files", 5, TS)
    assert np.array_equal(load_image(tmp_path / "wm_9_5.png"), quantize8(img))
    assert json.loads((tmp_path / "wm_9_5.json").read_text())["checkpoint_hash"] == "abc"


def test_timestamp_defaults_to_now(backend, nets):
    _, m = generate_watermarked("now", 0, backend, nets, steps=2)
    MetadataRecord("now", 0, m.timestamp)  # validates the format


def test_geometry_mismatch_and_adapter(nets):
    small = StubDiffusionBackend(make_backend("stub-v1").ae, "v1", image_size=256)
    with pytest.raises(GeometryMismatch):
        generate_watermarked("g", 1, small, nets, steps=2, timestamp=TS)
    img, _ = generate_watermarked("g", 1, small, nets, steps=2, timestamp=TS, adapt_geometry=True)
    assert img.shape == (256, 256, 3)


def test_channel_out_of_range_rejected(backend, nets):
    class ThreeChannel:
        latent_shape = (3, 64, 64)

    with pytest.raises(ValueError):
        generate_watermarked("k", 1, ThreeChannel(), nets, FusionConfig(0.05, 3), timestamp=TS)


def test_two_variants_share_autoencoder(nets):
    v1, v2 = make_backend("stub-v1"), make_backend("stub-v2")
    assert all(torch.equal(v, v2.ae.state_dict()[k]) for k, v in v1.ae.state_dict().items())
    assert v1.weight_hash() != v2.weight_hash()
    a, _ = generate_watermarked("same prompt", 2, v1, nets, seed=0, steps=3, timestamp=TS)
    b, _ = generate_watermarked("same prompt", 2, v2, nets, seed=0, steps=3, timestamp=TS)
    assert not np.array_equal(a, b)


def test_verify_with_expected_meta():
    meta = MetadataRecord("verify me", 6, TS)
    w = render_payload(meta)
    rep = verify_image(np.zeros((512, 512, 3), np.float32), EchoNets(w), expected_meta=meta)
    assert rep.detected and rep.mean_confidence == 1.0
    assert rep.fields == meta.to_dict()
    assert rep.nc == pytest.approx(1.0) and rep.ca == 0 and rep.cer_pct == 0.0 and rep.user_id_ok
    wrong = MetadataRecord("verify me", 7, TS)
    rep2 = verify_image(np.zeros((512, 512, 3), np.float32), EchoNets(w), expected_meta=wrong)
    assert rep2.ca == 1 and not rep2.user_id_ok
    assert "per_cell_confidence" not in rep.to_dict()


def test_verify_blank_extraction_not_detected():
    rep = verify_image(np.zeros((512, 512, 3), np.float32), EchoNets(np.zeros((256, 256, 1))))
    assert not rep.detected and rep.fields is None and rep.nc is None


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1), max_size=300), st.sampled_from([0.0, 0.01, 0.05]), st.floats(0, 1))
def test_calibrated_threshold_meets_target(scores, target, floor):
    thr = calibrate_threshold(scores, target, floor)
    assert thr >= floor
    assert false_positive_rate(scores, thr) <= target
    if scores and thr > floor:
        n = len(scores)
        allowed = n - min(n, math.ceil((n + 1) * (1 - target) - 1e-9))
        # one ulp lower fires on more calibration scores than the rank allows
        assert false_positive_rate(scores, np.nextafter(thr, -np.inf)) * n > allowed


def test_calibrated_threshold_holds_on_fresh_negatives():
    # For uniform negatives a fresh score fires with probability 1 - threshold; over
    # calibration sets of 200 that is Beta(2, 199) distributed, mean 2/201 < 1%.
    rng = np.random.default_rng(0)
    rates = np.array([1.0 - calibrate_threshold(rng.uniform(size=200), 0.01, 0.0) for _ in range(4000)])
    se = rates.std() / np.sqrt(rates.size)
    assert abs(rates.mean() - 2 / 201) < 4 * se
    assert rates.mean() <= 0.01 + 4 * se


def test_false_positive_rate_examples():
    assert false_positive_rate([0.1, 0.6, 0.7, 0.9], 0.7) == 0.5
    assert false_positive_rate([], 0.6) == 0.0
    assert calibrate_threshold([]) == 0.6


def test_random_meta_ranges():
    rng = np.random.default_rng(0)
    metas = [random_meta("p", rng) for _ in range(200)]
    assert {m.user_id for m in metas} == set(range(10))
    assert all("2020" <= m.timestamp[:4] <= "2029" for m in metas)


def test_evaluate_latents_zero_alpha_is_lossless(backend, nets):
    samples = latents_from_prompts(backend, ["one", "two"], steps=2)
    rep, results = evaluate_latents(samples, backend, nets, FusionConfig(0.0, 3))
    assert rep.psnr_db == PSNR_CAP
    assert rep.ssim_pct == pytest.approx(100.0)
    assert rep.sample_count == 2 and len(results) == 2


def test_alpha_sweep_order_and_rows(backend, nets):
    samples = latents_from_prompts(backend, ["s"], steps=2)
    with pytest.raises(ValueError):
        alpha_sweep(backend, nets, samples, [0.1, 0.05])
    rows = alpha_sweep(backend, nets, samples, [0.0, 0.5])
    assert [r["alpha"] for r in rows] == [0.0, 0.5]
    assert rows[0]["ssim_pct"] > rows[1]["ssim_pct"]
    assert {"psnr_db", "ssim_pct", "nc_pct", "ca", "cer_pct", "uid_acc_pct", "samples"} <= set(rows[0])


def test_channel_ablation_checks_kappa(backend, nets):
    samples = [LatentSample(backend.denoise_to_latent("c", steps=2), MetadataRecord("c", 1, TS), "prompt:0")]
    with pytest.raises(ValueError, match="kappa"):
        channel_ablation(backend, {0: (nets, FusionConfig(0.05, 1))}, samples)
    rows = channel_ablation(backend, {k: (nets, FusionConfig(0.05, k)) for k in (0, 3)}, samples)
    assert [r["kappa"] for r in rows] == [0, 3]
    assert all(isinstance(r["feasible"], bool) for r in rows)


def test_save_load_image(tmp_path):
    img = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
    save_image(img, tmp_path / "i.png")
    assert np.array_equal(load_image(tmp_path / "i.png"), quantize8(img))
