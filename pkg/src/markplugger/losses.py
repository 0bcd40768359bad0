"""Training objectives: image distortion, watermark reconstruction, robustness term.

    L1  = g0 * MSE(x, x_w) + g1 * sum_l w_l * MSE(phi_l(x), phi_l(x_w))
    L2  = g2 * MSE(w, w')
    L_r = L1 + L2 + g3 * MSE(w, w_hat')

``phi_l`` are channel-normalized feature maps of a VGG-16-shaped network.
MSE always averages over elements.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from functools import lru_cache

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BackendUnavailable, ShapeMismatch

VGG16_STAGES = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class LossWeights:
    gamma0: float = 2.0
    gamma1: float = 0.2
    gamma2: float = 1.0
    gamma3: float = 1.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{name} must be non-negative, got {v}")

    def check_balance(self) -> bool:
        """Warn when gamma0 != gamma2 + gamma3 (the recommended balance). Returns True if balanced."""
        ok = abs(self.gamma0 - (self.gamma2 + self.gamma3)) < 1e-9
        if not ok:
            warnings.warn(
                f"gamma0={self.gamma0} differs from gamma2 + gamma3 = {self.gamma2 + self.gamma3}; "
                "the usual setting keeps the image-distortion weight equal to the sum of the "
                "two watermark weights", UserWarning, stacklevel=2)
        return ok


@dataclass(frozen=True)
class PerceptualConfig:
    """Feature-distance settings.

    ``backbone="vgg16-random"`` is a VGG-16-shaped network with fixed seeded
    weights; ``"vgg16-imagenet"`` loads torchvision's pretrained VGG-16 and
    fails with ``BackendUnavailable`` if the weights are not in the torch cache.
    ``width`` scales every stage's channel count; ``input_size`` is the side
    the images are resized to before feature extraction.
    """

    layer_weights: tuple = (0.2, 0.2, 0.2, 0.2, 0.2)
    normalize_features: bool = True
    backbone: str = "vgg16-random"
    width: float = 0.125
    input_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if len(self.layer_weights) != len(VGG16_STAGES):
            raise ValueError(f"need one weight per VGG stage ({len(VGG16_STAGES)})")
        if any(w < 0 for w in self.layer_weights):
            raise ValueError("layer weights must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_weights"] = list(self.layer_weights)
        return d


class VGGFeatures(nn.Module):
    """VGG-16 conv trunk returning the last ReLU of each of its five stages."""

    def __init__(self, width: float = 1.0):
        super().__init__()
        self.stages = nn.ModuleList()
        prev = 3
        for i, (ch, n) in enumerate(VGG16_STAGES):
            ch = max(4, int(round(ch * width)))
            layers = [nn.MaxPool2d(2)] if i else []
            for _ in range(n):
                layers += [nn.Conv2d(prev, ch, 3, padding=1), nn.ReLU(inplace=False)]
                prev = ch
            self.stages.append(nn.Sequential(*layers))
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x):
        x = (x - self.mean) / self.std
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


@lru_cache(maxsize=4)
def perceptual_network(cfg: PerceptualConfig) -> VGGFeatures:
    """Build (once per config) the frozen feature network."""
    if cfg.backbone == "vgg16-random":
        g = torch.Generator().manual_seed(cfg.seed)
        net = VGGFeatures(cfg.width)
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * 9
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()
    elif cfg.backbone == "vgg16-imagenet":
        if cfg.width != 1.0:
            raise ValueError("pretrained VGG-16 weights require width=1.0")
        net = _load_imagenet_vgg()
    else:
        raise BackendUnavailable(f"unknown perceptual backbone {cfg.backbone!r}")
    net.eval().requires_grad_(False)
    return net


def _load_imagenet_vgg() -> VGGFeatures:
    try:
        from torchvision.models import VGG16_Weights, vgg16

        tv = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
    except Exception as e:
        raise BackendUnavailable(f"pretrained VGG-16 weights unavailable: {e}") from e
    net = VGGFeatures(1.0)
    src = [m for m in tv.features if isinstance(m, nn.Conv2d)]
    dst = [m for m in net.modules() if isinstance(m, nn.Conv2d)]
    for s, d in zip(src, dst):
        d.load_state_dict(s.state_dict())
    return net


def _unit(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / torch.sqrt((f * f).sum(dim=1, keepdim=True) + eps)


def _check_same(x, y):
    if x.shape != y.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")


def perceptual_distance(x: torch.Tensor, y: torch.Tensor, cfg: PerceptualConfig = PerceptualConfig(),
                        reduce: bool = True) -> torch.Tensor:
    """Weighted per-stage MSE between feature maps; images are (B, 3, H, W) in [0, 1]."""
    _check_same(x, y)
    if all(w == 0 for w in cfg.layer_weights):
        return x.new_zeros(()) if reduce else x.new_zeros(x.shape[0])
    net = perceptual_network(cfg).to(x.device, x.dtype)
    if cfg.input_size and x.shape[-1] != cfg.input_size:
        size = (cfg.input_size, cfg.input_size)
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=True)
        y = F.interpolate(y, size=size, mode="bilinear", align_corners=False, antialias=True)
    feats = net(torch.cat([x, y]))
    total = x.new_zeros(x.shape[0])
    b = x.shape[0]
    for w, f in zip(cfg.layer_weights, feats):
        if w == 0:
            continue
        a, c = f[:b], f[b:]
        if cfg.normalize_features:
            a, c = _unit(a), _unit(c)
        total = total + w * ((a - c) ** 2).flatten(1).mean(1)
    return total.mean() if reduce else total


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same(a, b)
    return ((a - b) ** 2).mean()


def image_distortion_loss(x, x_w, weights: LossWeights = LossWeights(),
                          cfg: PerceptualConfig = PerceptualConfig()) -> torch.Tensor:
    _check_same(x, x_w)
    loss = weights.gamma0 * mse(x, x_w)
    if weights.gamma1:
        loss = loss + weights.gamma1 * perceptual_distance(x, x_w, cfg)
    return loss


def watermark_recon_loss(w, w_prime, gamma2: float = 1.0) -> torch.Tensor:
    _check_same(w, w_prime)
    return gamma2 * mse(w.to(w_prime.dtype), w_prime)


def loss_terms(x, x_w, w, w_prime, w_hat_prime, cfg: PerceptualConfig = PerceptualConfig(),
               need_perceptual: bool = True) -> dict:
    """Unweighted components: image MSE, perceptual, clean and attacked watermark MSE."""
    _check_same(w, w_hat_prime)
    w = w.to(w_prime.dtype)
    return {
        "image_mse": mse(x, x_w),
        "perceptual": perceptual_distance(x, x_w, cfg) if need_perceptual else x.new_zeros(()),
        "wm_mse": mse(w, w_prime),
        "wm_attacked_mse": mse(w, w_hat_prime),
    }


def weighted_total(terms: dict, weights: LossWeights) -> torch.Tensor:
    return (weights.gamma0 * terms["image_mse"] + weights.gamma1 * terms["perceptual"]
            + weights.gamma2 * terms["wm_mse"] + weights.gamma3 * terms["wm_attacked_mse"])


def total_loss(x, x_w, w, w_prime, w_hat_prime, weights: LossWeights = LossWeights(),
               cfg: PerceptualConfig = PerceptualConfig()) -> torch.Tensor:
    """Robustness-augmented objective; with gamma3 = 0 it is the plain composite loss."""
    terms = loss_terms(x, x_w, w, w_prime, w_hat_prime, cfg, need_perceptual=weights.gamma1 != 0)
    return weighted_total(terms, weights)


def latent_cosine(rho: torch.Tensor, z_channel: torch.Tensor) -> torch.Tensor:
    """Per-sample cosine between the watermark signal and the carrier channel (diagnostic only)."""
    a, b = rho.flatten(1), z_channel.flatten(1)
    return (a * b).sum(1) / (a.norm(dim=1) * b.norm(dim=1)).clamp_min(1e-12)
