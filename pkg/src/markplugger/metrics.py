"""Invisibility, recoverability and image-quality metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .errors import BackendUnavailable, EmptyInput, SampleTooSmall, ShapeMismatch
from .payload import (DEFAULT_LAYOUT, binarize, character_edit_ratio, decode_payload, edit_distance,
                      payload_text, render_payload)

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])
FID_MIN_SAMPLES = 2048
FID_HARD_FLOOR = 64


class ImageTooSmall(ShapeMismatch):
    pass


def _as_np(a) -> np.ndarray:
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    return np.asarray(a, dtype=np.float64)


def _same(x, y):
    if x.shape != y.shape:
        raise ShapeMismatch(f"shapes differ: {x.shape} vs {y.shape}")


def psnr(x, y, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for (near-)identical inputs."""
    x, y = _as_np(x), _as_np(y)
    _same(x, y)
    err = float(np.mean((x - y) ** 2))
    if err < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / err))


def to_gray(img: np.ndarray) -> np.ndarray:
    """HxW or HxWx1 passes through; HxWx3 is converted to luma."""
    img = _as_np(img)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA
    if img.ndim == 3 and img.shape[-1] == 1:
        return img[..., 0]
    if img.ndim != 2:
        raise ShapeMismatch(f"expected an HxW(xC) image, got {img.shape}")
    return img


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    from scipy.signal import convolve2d

    return convolve2d(convolve2d(img, g[None, :], mode="valid"), g[:, None], mode="valid")


def ssim(x, y, data_range: float = 1.0, win: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-inside 11x11 Gaussian windows (sigma 1.5), K1=0.01, K2=0.03."""
    x, y = to_gray(x), to_gray(y)
    _same(x, y)
    if min(x.shape) < win:
        raise ImageTooSmall(f"image {x.shape} smaller than the {win}x{win} window")
    g = _gauss_window(win, sigma)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def normalized_correlation(w, w_prime) -> float:
    """Cosine similarity of the flattened images; 0 when either has zero norm."""
    a, b = _as_np(w).ravel(), _as_np(w_prime).ravel()
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {_as_np(w).shape} vs {_as_np(w_prime).shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


class FeatureStats:
    """Running mean/covariance sufficient statistics; shards merge associatively."""

    def __init__(self, dim: int):
        self.n = 0
        self.s = np.zeros(dim)
        self.ss = np.zeros((dim, dim))

    def update(self, feats) -> "FeatureStats":
        f = _as_np(feats)
        self.n += f.shape[0]
        self.s += f.sum(0)
        self.ss += f.T @ f
        return self

    def merge(self, other: "FeatureStats") -> "FeatureStats":
        out = FeatureStats(self.s.shape[0])
        out.n, out.s, out.ss = self.n + other.n, self.s + other.s, self.ss + other.ss
        return out

    def mean_cov(self):
        mu = self.s / self.n
        cov = (self.ss - self.n * np.outer(mu, mu)) / max(self.n - 1, 1)
        return mu, cov


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    diff = np.asarray(mu1) - np.asarray(mu2)
    covmean, _ = linalg.sqrtm(np.asarray(cov1) @ np.asarray(cov2), disp=False)
    if not np.isfinite(covmean).all():
        eps = np.eye(len(diff)) * 1e-6
        covmean = linalg.sqrtm((cov1 + eps) @ (cov2 + eps))
    covmean = np.real(covmean)
    return float(max(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * np.trace(covmean), 0.0))


def fid_from_features(a, b) -> float:
    sa = FeatureStats(_as_np(a).shape[1]).update(a)
    sb = FeatureStats(_as_np(b).shape[1]).update(b)
    return frechet_distance(*sa.mean_cov(), *sb.mean_cov())


def delta_fid_from_scores(fid_original: float, fid_watermarked: float) -> tuple[float, float]:
    """(FID_wm - FID_orig, |delta| / FID_orig in percent)."""
    delta = fid_watermarked - fid_original
    return delta, abs(delta) / fid_original * 100.0


def random_vgg_features(images, batch: int = 16) -> np.ndarray:
    """Spatially pooled features of the seeded VGG-16-shaped network (indicative FID only)."""
    import torch

    from .losses import PerceptualConfig, perceptual_network

    net = perceptual_network(PerceptualConfig(width=0.25, input_size=256))
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = torch.stack([torch.as_tensor(np.asarray(im), dtype=torch.float32).permute(2, 0, 1)
                             for im in images[i:i + batch]])
            x = torch.nn.functional.interpolate(x, size=(256, 256), mode="bilinear", antialias=True)
            f = net(x)
            out.append(torch.cat([f[-2].mean((2, 3)), f[-1].mean((2, 3))], 1).numpy())
    return np.concatenate(out).astype(np.float64)


def inception_features(images, batch: int = 16) -> np.ndarray:
    """Pool features of torchvision's Inception-v3; needs the pretrained weights locally."""
    import torch

    try:
        from torchvision.models import Inception_V3_Weights, inception_v3

        net = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1, aux_logits=True).eval()
    except Exception as e:
        raise BackendUnavailable(f"Inception-v3 weights unavailable: {e}") from e
    net.fc = torch.nn.Identity()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = torch.stack([torch.as_tensor(np.asarray(im), dtype=torch.float32).permute(2, 0, 1)
                             for im in images[i:i + batch]])
            x = torch.nn.functional.interpolate(x, size=(299, 299), mode="bilinear", antialias=True)
            x = (x - torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)) / torch.tensor(
                [0.229, 0.224, 0.225]).view(1, 3, 1, 1)
            out.append(net(x).numpy())
    return np.concatenate(out).astype(np.float64)


FEATURES = {"inception": inception_features, "random-vgg": random_vgg_features}


def fid_delta(originals, watermarked, reference, features="inception",
              min_samples: int = FID_MIN_SAMPLES) -> tuple[float, float]:
    """Change in FID against ``reference`` caused by watermarking, and its share of the original FID."""
    n = min(len(originals), len(watermarked), len(reference))
    if n < FID_HARD_FLOOR:
        raise SampleTooSmall(f"FID needs at least {FID_HARD_FLOOR} images per set, got {n}")
    if n < min_samples:
        warnings.warn(f"FID on {n} < {min_samples} samples per set is indicative only", UserWarning,
                      stacklevel=2)
    feat = FEATURES[features] if isinstance(features, str) else features
    f_ref = feat(reference)
    f_orig = feat(originals)
    f_wm = f_orig if watermarked is originals else feat(watermarked)
    fid_orig = fid_from_features(f_orig, f_ref)
    fid_wm = fid_orig if np.array_equal(f_wm, f_orig) else fid_from_features(f_wm, f_ref)
    return delta_fid_from_scores(fid_orig, fid_wm)


@dataclass
class EvalReport:
    psnr_db: float
    ssim_pct: float
    lpips: float
    nc_pct: float
    ca: float
    cer_pct: float
    sample_count: int
    uid_acc_pct: float = 0.0
    prompt_ca: float = 0.0
    delta_fid: float | None = None
    p_delta_fid_pct: float | None = None
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.delta_fid is None:
            d.pop("delta_fid")
            d.pop("p_delta_fid_pct")
        return d


@dataclass
class PairResult:
    psnr_db: float
    ssim: float
    lpips: float
    nc: float
    ca: int
    n_chars: int
    uid_ok: bool
    prompt_ca: int
    decoded: str


def score_pair(original, watermarked, w_true, meta, w_prime, layout=DEFAULT_LAYOUT, lpips_fn=None,
               threshold: float = 0.5) -> PairResult:
    """All per-pair metrics. Images are HxWx3 in [0, 1]; ``w_prime`` is the raw extraction."""
    w_bin = binarize(np.asarray(w_prime, dtype=np.float64).reshape(256, 256, 1), threshold)
    decoded = decode_payload(w_bin, layout)
    truth, _ = payload_text(meta, layout)
    fields = decoded.fields
    true_prompt = truth.split("\n")[0]
    got_prompt = fields["prompt"] if fields else decoded.text.split("\n")[0]
    return PairResult(
        psnr_db=psnr(original, watermarked),
        ssim=ssim(original, watermarked),
        lpips=float(lpips_fn(original, watermarked)) if lpips_fn else 0.0,
        nc=normalized_correlation(w_true, w_bin),
        ca=edit_distance(decoded.text, truth),
        n_chars=len(truth),
        uid_ok=bool(fields and fields["user_id"] == int(meta.user_id)),
        prompt_ca=edit_distance(got_prompt, true_prompt),
        decoded=decoded.text,
    )


def lpips_fn_from(cfg=None):
    """Perceptual distance on single HxWx3 images, reusing the training-loss configuration."""
    import torch

    from .losses import PerceptualConfig, perceptual_distance

    cfg = cfg or PerceptualConfig()

    def fn(a, b):
        ta = torch.as_tensor(np.asarray(a), dtype=torch.float32).permute(2, 0, 1)[None]
        tb = torch.as_tensor(np.asarray(b), dtype=torch.float32).permute(2, 0, 1)[None]
        with torch.no_grad():
            return float(perceptual_distance(ta, tb, cfg))

    return fn


def aggregate(results: list, failures: list | None = None) -> EvalReport:
    if not results:
        raise EmptyInput("no successfully scored pairs")
    return EvalReport(
        psnr_db=float(np.mean([r.psnr_db for r in results])),
        ssim_pct=float(np.mean([r.ssim for r in results]) * 100),
        lpips=float(np.mean([r.lpips for r in results])),
        nc_pct=float(np.mean([r.nc for r in results]) * 100),
        ca=float(np.mean([r.ca for r in results])),
        cer_pct=character_edit_ratio([(r.ca, r.n_chars) for r in results]),
        sample_count=len(results),
        uid_acc_pct=float(np.mean([r.uid_ok for r in results]) * 100),
        prompt_ca=float(np.mean([r.prompt_ca for r in results])),
        failures=list(failures or []),
    )


def evaluate_batch(pairs, extract, layout=DEFAULT_LAYOUT, lpips_fn=None) -> tuple[EvalReport, list]:
    """Score ``(original, watermarked, w_true, meta)`` tuples.

    ``extract`` maps a watermarked HxWx3 image to a 256x256(x1) array in
    [0, 1]; pass a ``WatermarkNets`` to use its extractor. A tuple may carry a
    fifth element, an extraction computed by the caller, in which case
    ``extract`` is not called for it. ``pairs`` may be any iterable and is
    consumed once. A pair that raises is recorded in ``report.failures`` and
    skipped.
    """
    if hasattr(extract, "extract"):
        extract = extractor_fn(extract)
    results, failures, seen = [], [], 0
    for i, item in enumerate(pairs):
        seen += 1
        try:
            orig, wm, w_true, meta = item[:4]
            if w_true is None:
                w_true = render_payload(meta, layout)
            w_prime = item[4] if len(item) > 4 else extract(wm)
            results.append(score_pair(orig, wm, w_true, meta, w_prime, layout, lpips_fn))
        except Exception as e:  # a bad pair must not sink the batch
            failures.append({"index": i, "error": f"{type(e).__name__}: {e}"})
    if not seen:
        raise EmptyInput("evaluate_batch needs at least one pair")
    return aggregate(results, failures), results


def extractor_fn(nets):
    import torch

    def fn(img):
        x = torch.as_tensor(np.asarray(img), dtype=torch.float32).permute(2, 0, 1)[None]
        with torch.no_grad():
            return nets.extract(x)[0, 0].numpy()[..., None]

    return fn
