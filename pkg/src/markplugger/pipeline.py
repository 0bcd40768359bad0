"""Inference-time embedding, verification and the evaluation sweeps built on them.

Embedding never touches backend weights: the backend denoises to its final
latent, the watermark signal is added to one channel, and the frozen decoder
renders the result.
"""

from __future__ import annotations

import datetime as _dt
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import AttackSpec, apply_attack
from .errors import GeometryMismatch
from .metrics import EvalReport, evaluate_batch, normalized_correlation
from .nets import FusionConfig, WatermarkNets, checkpoint_hash, fuse_latent
from .payload import (DEFAULT_LAYOUT, TIMESTAMP_FORMAT, GlyphLayout, MetadataRecord, binarize, decode_payload,
                      edit_distance, payload_text, render_payload)

DEFAULT_STEPS = 30
PRESENCE_THRESHOLD = 0.6


def to_hwc(x: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) tensor -> HxWx3 float32 array clamped to [0, 1]."""
    if x.dim() == 4:
        x = x[0]
    return x.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy().astype(np.float32)


def to_nchw(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8)


def _from_u8(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32) / np.float32(255.0)


def quantize8(img: np.ndarray) -> np.ndarray:
    """What an 8-bit PNG round trip does to a float image."""
    return _from_u8(_to_u8(img))


def save_image(img: np.ndarray, path) -> None:
    """Write an HxWx3 float image in [0, 1] as an 8-bit RGB PNG."""
    from PIL import Image

    Image.fromarray(_to_u8(img), mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    """Read any image file as HxWx3 float32 in [0, 1]."""
    from PIL import Image

    return _from_u8(np.asarray(Image.open(path).convert("RGB")))


def _rho_for(backend, nets: WatermarkNets, w: torch.Tensor, adapt: bool) -> torch.Tensor:
    rho = nets.encode(w)
    want = tuple(backend.latent_shape[1:])
    if tuple(rho.shape[-2:]) != want:
        if not adapt:
            raise GeometryMismatch(f"{backend.identifier} has {want} latents, the watermark encoder emits "
                                   f"{tuple(rho.shape[-2:])}; enable the resize adapter to bridge them")
        rho = F.interpolate(rho, size=want, mode="bilinear", align_corners=False)
    return rho


@dataclass
class GenerationManifest:
    prompt: str
    user_id: int
    timestamp: str
    backend: str
    backend_hash: str
    fusion: dict
    layout: dict
    seed: int
    steps: int
    checkpoint_hash: str
    payload_truncated: bool
    output_image: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationManifest":
        return cls(**d)

    def meta(self) -> MetadataRecord:
        return MetadataRecord(self.prompt, self.user_id, self.timestamp)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "GenerationManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


@torch.no_grad()
def generate_watermarked(prompt: str, user_id: int, backend, nets: WatermarkNets,
                         fusion: FusionConfig = FusionConfig(), seed: int = 0, steps: int = DEFAULT_STEPS,
                         timestamp: str | None = None, layout: GlyphLayout = DEFAULT_LAYOUT,
                         out_dir=None, ckpt_hash: str = "", adapt_geometry: bool = False):
    """Generate an image for ``prompt`` carrying (prompt, user_id, timestamp).

    Returns ``(image, manifest)``; the image is HxWx3 float32 in [0, 1]. With
    ``out_dir`` the PNG and its manifest are written there.
    """
    fusion.check_channels(backend.latent_shape[0])
    timestamp = timestamp or _dt.datetime.now().strftime(TIMESTAMP_FORMAT)
    meta = MetadataRecord(prompt, int(user_id), timestamp)
    _, truncated = payload_text(meta, layout)
    z = backend.denoise_to_latent(prompt, steps=steps, seed=seed)
    w = torch.from_numpy(render_payload(meta, layout)).permute(2, 0, 1)[None].float()
    if fusion.alpha == 0:
        zw = z  # exact native generation; no watermark arithmetic at all
    else:
        zw = fuse_latent(z, _rho_for(backend, nets, w, adapt_geometry), fusion)
    image = to_hwc(backend.decode_latent(zw))
    manifest = GenerationManifest(
        prompt=prompt, user_id=int(user_id), timestamp=timestamp, backend=backend.identifier,
        backend_hash=backend.weight_hash(), fusion=asdict(fusion), layout=layout.to_dict(), seed=int(seed),
        steps=int(steps), checkpoint_hash=ckpt_hash, payload_truncated=truncated)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"wm_{seed}_{user_id}"
        save_image(image, out / f"{stem}.png")
        manifest.output_image = f"{stem}.png"
        manifest.save(out / f"{stem}.json")
    return image, manifest


@torch.no_grad()
def generate_native(prompt: str, backend, seed: int = 0, steps: int = DEFAULT_STEPS) -> np.ndarray:
    """The backend's own output for (prompt, seed, steps), without any watermark."""
    return to_hwc(backend.decode_latent(backend.denoise_to_latent(prompt, steps=steps, seed=seed)))


@dataclass
class VerificationReport:
    detected: bool
    mean_confidence: float
    threshold: float
    text: str
    fields: dict | None
    per_cell_confidence: list = field(repr=False, default_factory=list)
    nc: float | None = None
    ca: int | None = None
    n_chars: int | None = None
    cer_pct: float | None = None
    user_id_ok: bool | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_cell_confidence")
        return d


@torch.no_grad()
def extract_raw(image: np.ndarray, nets: WatermarkNets) -> np.ndarray:
    """HxWx3 image -> 256x256x1 float extraction in [0, 1]."""
    return nets.extract(to_nchw(image))[0].permute(1, 2, 0).numpy()


def verify_image(image: np.ndarray, nets: WatermarkNets, layout: GlyphLayout = DEFAULT_LAYOUT,
                 expected_meta: MetadataRecord | None = None,
                 threshold: float = PRESENCE_THRESHOLD) -> VerificationReport:
    """Extract, binarize and decode; compare with ``expected_meta`` when given.

    ``detected`` is the presence decision: mean confidence over non-blank
    decoded cells at or above ``threshold``.
    """
    w_bin = binarize(extract_raw(image, nets))
    decoded = decode_payload(w_bin, layout)
    conf = decoded.mean_confidence
    report = VerificationReport(detected=conf >= threshold, mean_confidence=conf, threshold=threshold,
                                text=decoded.text, fields=decoded.fields,
                                per_cell_confidence=decoded.per_cell_confidence)
    if expected_meta is not None:
        truth, _ = payload_text(expected_meta, layout)
        report.nc = normalized_correlation(render_payload(expected_meta, layout), w_bin)
        report.ca = edit_distance(decoded.text, truth)
        report.n_chars = len(truth)
        report.cer_pct = 100.0 * report.ca / len(truth)
        report.user_id_ok = bool(decoded.fields and decoded.fields["user_id"] == expected_meta.user_id)
    return report


def presence_scores(images, nets: WatermarkNets, layout: GlyphLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """Mean non-blank decode confidence for each image."""
    return np.array([decode_payload(binarize(extract_raw(img, nets)), layout).mean_confidence for img in images])


def calibrate_threshold(negative_scores, target_fpr: float = 0.01, floor: float = PRESENCE_THRESHOLD) -> float:
    """Threshold >= ``floor`` set at the finite-sample quantile of the negative scores.

    With n calibration negatives the threshold sits just above the
    ceil((n + 1)(1 - target_fpr))-th smallest score, so a fresh negative drawn
    from the same distribution fires with probability at most ``target_fpr``.
    When n is too small for that rank, it sits above the largest score.
    """
    s = np.sort(np.asarray(negative_scores, dtype=np.float64))
    if s.size == 0:
        return floor
    rank = int(math.ceil((s.size + 1) * (1.0 - target_fpr) - 1e-9))
    cut = s[min(rank, s.size) - 1]
    # Scores at or above the threshold fire; everything up to `cut` stays silent.
    return float(max(floor, np.nextafter(cut, np.inf)))


def false_positive_rate(scores, threshold: float) -> float:
    s = np.asarray(scores, dtype=np.float64)
    return float(np.mean(s >= threshold)) if s.size else 0.0


# --- evaluation over latents -------------------------------------------------


@dataclass
class LatentSample:
    """A clean latent, the metadata to embed in it, and where it came from."""

    z: torch.Tensor  # (1, C, h, w)
    meta: MetadataRecord
    source: str


def random_meta(prompt: str, rng: np.random.Generator) -> MetadataRecord:
    """Metadata with a U{0..9} user ID and a timestamp drawn uniformly from 2020-2029."""
    start = _dt.datetime(2020, 1, 1)
    seconds = int(rng.integers(0, 10 * 365 * 86400))
    ts = (start + _dt.timedelta(seconds=seconds)).strftime(TIMESTAMP_FORMAT)
    return MetadataRecord(prompt, int(rng.integers(0, 10)), ts)


@torch.no_grad()
def latents_from_corpus(backend, dataset, indices, seed: int = 0) -> list:
    """Encode corpus images with the backend's frozen encoder (the training-time path)."""
    rng = np.random.default_rng([seed, 7])
    out = []
    for i in indices:
        img, caption = dataset[int(i)]
        out.append(LatentSample(backend.encode_image(to_nchw(img)), random_meta(caption, rng), f"image:{i}"))
    return out


@torch.no_grad()
def latents_from_prompts(backend, prompts, seed: int = 0, steps: int = DEFAULT_STEPS) -> list:
    """Denoise each prompt to its final latent (the inference-time path)."""
    rng = np.random.default_rng([seed, 11])
    return [LatentSample(backend.denoise_to_latent(p, steps=steps, seed=seed + k), random_meta(p, rng),
                         f"prompt:{k}") for k, p in enumerate(prompts)]


@torch.no_grad()
def _pairs(samples, backend, nets, fusion, layout, attack, quantize, adapt_geometry):
    for s in samples:
        w_np = render_payload(s.meta, layout)
        original = to_hwc(backend.decode_latent(s.z))
        if fusion.alpha == 0:
            marked = original
        else:
            w = torch.from_numpy(w_np).permute(2, 0, 1)[None].float()
            zw = fuse_latent(s.z, _rho_for(backend, nets, w, adapt_geometry), fusion)
            marked = to_hwc(backend.decode_latent(zw))
        if quantize:
            original, marked = quantize8(original), quantize8(marked)
        seen = marked
        if attack is not None:
            seen = apply_attack(marked, attack)
        yield original, marked, w_np, s.meta, extract_raw(seen, nets)


def evaluate_latents(samples, backend, nets: WatermarkNets, fusion: FusionConfig = FusionConfig(),
                     layout: GlyphLayout = DEFAULT_LAYOUT, attack: AttackSpec | None = None,
                     lpips_fn=None, quantize: bool = True, adapt_geometry: bool = False) -> tuple[EvalReport, list]:
    """Embed every sample, optionally attack it, extract, and score.

    Invisibility metrics compare the decoded clean latent with the decoded
    watermarked latent (before any attack); recoverability metrics use the
    extraction from the (attacked) delivered image. ``quantize`` applies the
    8-bit rounding every saved image goes through.
    """
    fusion.check_channels(backend.latent_shape[0])
    nets.eval()
    return evaluate_batch(_pairs(samples, backend, nets, fusion, layout, attack, quantize, adapt_geometry),
                          nets, layout, lpips_fn)


def _row(report: EvalReport, **keys) -> dict:
    row = dict(keys)
    row.update(psnr_db=report.psnr_db, ssim_pct=report.ssim_pct, nc_pct=report.nc_pct, ca=report.ca,
               cer_pct=report.cer_pct, uid_acc_pct=report.uid_acc_pct, samples=report.sample_count)
    return row


def alpha_sweep(backend, nets: WatermarkNets, samples, alphas, kappa: int = 3,
                layout: GlyphLayout = DEFAULT_LAYOUT) -> list:
    """One row of SSIM / CER (and companions) per strength, in the given ascending order."""
    alphas = [float(a) for a in alphas]
    if alphas != sorted(alphas):
        raise ValueError("alphas must be sorted ascending")
    return [_row(evaluate_latents(samples, backend, nets, FusionConfig(a, kappa), layout)[0], alpha=a)
            for a in alphas]


def attack_sweep(backend, nets: WatermarkNets, samples, specs, fusion: FusionConfig = FusionConfig(),
                 layout: GlyphLayout = DEFAULT_LAYOUT) -> list:
    """NC / CER under each attack in ``specs`` (see ``attacks.attack_sweep_grid``)."""
    rows = []
    for spec in specs:
        rep, _ = evaluate_latents(samples, backend, nets, fusion, layout, attack=spec)
        rows.append(_row(rep, kind=spec.kind, intensity=float(spec.intensity)))
    return rows


def channel_ablation(backend, nets_per_channel: dict, samples, alpha: float | None = None,
                     layout: GlyphLayout = DEFAULT_LAYOUT, nc_gate: float = 90.0) -> list:
    """Score one checkpoint per carrier channel on the same samples.

    ``nets_per_channel`` maps kappa -> (nets, FusionConfig) as loaded from the
    checkpoints. Every row records whether it clears ``nc_gate`` (percent).
    """
    rows = []
    for kappa in sorted(nets_per_channel):
        nets, fusion = nets_per_channel[kappa]
        if fusion.kappa != kappa:
            raise ValueError(f"checkpoint for kappa={kappa} was trained with kappa={fusion.kappa}")
        fusion = FusionConfig(fusion.alpha if alpha is None else alpha, kappa)
        rep, _ = evaluate_latents(samples, backend, nets, fusion, layout)
        row = _row(rep, kappa=kappa, alpha=fusion.alpha)
        row["feasible"] = rep.nc_pct >= nc_gate
        rows.append(row)
    return rows


def ckpt_hash_or_empty(path) -> str:
    return checkpoint_hash(path) if path else ""
