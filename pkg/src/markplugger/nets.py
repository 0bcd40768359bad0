"""Watermark encoder, pixel-space extractor and single-channel latent fusion.

Tensors follow the torch NCHW convention: watermark images are (B, 1, 256, 256),
latents (B, C, 64, 64), pixel images (B, 3, 512, 512) in [0, 1].
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadChannel, ShapeMismatch

CKPT_FORMAT = "markplugger-ckpt/1"


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.05
    kappa: int = 3

    def __post_init__(self):
        if not (self.alpha >= 0 and self.alpha != float("inf")):
            raise ValueError(f"alpha must be finite and non-negative, got {self.alpha}")
        if self.kappa < 0:
            raise BadChannel(f"kappa must be non-negative, got {self.kappa}")

    def check_channels(self, channels: int):
        if self.kappa >= channels:
            raise BadChannel(f"kappa={self.kappa} but the latent has {channels} channels")


@dataclass(frozen=True)
class UNetSpec:
    base: int = 16
    levels: int = 2
    max_width: int = 128


@dataclass(frozen=True)
class WatermarkNetSpec:
    """Architecture descriptor. Defaults land near one million parameters."""

    watermark_size: int = 256
    latent_size: int = 64
    latent_channels: int = 4
    image_size: int = 512
    image_channels: int = 3
    encoder_stem: tuple = (16, 32)
    encoder_unet: UNetSpec = field(default_factory=lambda: UNetSpec(base=16, levels=3, max_width=128))
    extractor_width: int = 16
    extractor_layers: int = 3
    decoder_unet: UNetSpec = field(default_factory=lambda: UNetSpec(base=16, levels=3, max_width=128))
    groups: int = 4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WatermarkNetSpec":
        d = dict(d)
        d["encoder_stem"] = tuple(d["encoder_stem"])
        d["encoder_unet"] = UNetSpec(**d["encoder_unet"])
        d["decoder_unet"] = UNetSpec(**d["decoder_unet"])
        return cls(**d)


def _norm(ch: int, groups: int) -> nn.Module:
    g = groups
    while ch % g:
        g -= 1
    return nn.GroupNorm(g, ch)


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, groups, stride=1):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
            _norm(cout, groups),
            nn.SiLU(),
        )


class UNet(nn.Module):
    """Plain UNet: ``levels`` downsamplings, two convs per stage, skip concatenation."""

    def __init__(self, cin: int, cout: int, spec: UNetSpec, groups: int = 4):
        super().__init__()
        widths = [min(spec.base * 2 ** i, spec.max_width) for i in range(spec.levels + 1)]
        self.down = nn.ModuleList()
        prev = cin
        for w in widths[:-1]:
            self.down.append(nn.Sequential(ConvBlock(prev, w, groups), ConvBlock(w, w, groups)))
            prev = w
        self.mid = nn.Sequential(ConvBlock(prev, widths[-1], groups), ConvBlock(widths[-1], widths[-1], groups))
        self.up = nn.ModuleList()
        prev = widths[-1]
        for w in reversed(widths[:-1]):
            self.up.append(nn.Sequential(ConvBlock(prev + w, w, groups), ConvBlock(w, w, groups)))
            prev = w
        self.head = nn.Conv2d(prev, cout, 1)

    def forward(self, x):
        skips = []
        for stage in self.down:
            x = stage(x)
            skips.append(x)
            x = F.avg_pool2d(x, 2)
        x = self.mid(x)
        for stage, skip in zip(self.up, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = stage(torch.cat([x, skip], dim=1))
        return self.head(x)


class WatermarkEncoder(nn.Module):
    """Strided CNN stem down to latent resolution, a UNet, and a tanh head."""

    def __init__(self, spec: WatermarkNetSpec):
        super().__init__()
        layers, prev, size = [], 1, spec.watermark_size
        for w in spec.encoder_stem:
            layers.append(ConvBlock(prev, w, spec.groups, stride=2))
            prev, size = w, size // 2
        if size != spec.latent_size:
            raise ValueError("encoder stem does not reach the latent resolution")
        self.stem = nn.Sequential(*layers)
        self.unet = UNet(prev, 1, spec.encoder_unet, spec.groups)
        # Zero head: the initial watermark is null, so training starts at the identity.
        nn.init.zeros_(self.unet.head.weight)
        nn.init.zeros_(self.unet.head.bias)

    def forward(self, w):
        return torch.tanh(self.unet(self.stem(w)))


class WatermarkExtractor(nn.Module):
    """Coarse CNN in pixel space followed by a UNet decoder with sigmoid output."""

    def __init__(self, spec: WatermarkNetSpec):
        super().__init__()
        width = spec.extractor_width
        layers = [ConvBlock(spec.image_channels, width, spec.groups, stride=spec.image_size // spec.watermark_size)]
        layers += [ConvBlock(width, width, spec.groups) for _ in range(spec.extractor_layers - 1)]
        self.cnn = nn.Sequential(*layers)
        self.unet = UNet(width, 1, spec.decoder_unet, spec.groups)

    def forward(self, x):
        return torch.sigmoid(self.unet(self.cnn(x)))


class WatermarkNets(nn.Module):
    """Trainable part of the pipeline. Parameter names start with ``enc.``, ``ext.`` or ``dec.``."""

    def __init__(self, spec: WatermarkNetSpec | None = None):
        super().__init__()
        self.spec = spec or WatermarkNetSpec()
        self.enc = WatermarkEncoder(self.spec)
        extractor = WatermarkExtractor(self.spec)
        self.ext = extractor.cnn
        self.dec = extractor.unet

    def encode(self, w):
        return encode_watermark(w, self)

    def extract(self, x):
        return extract_watermark(x, self)


def _check(t, shape_tail, what):
    if t.dim() != 4 or tuple(t.shape[1:]) != tuple(shape_tail):
        raise ShapeMismatch(f"{what}: expected (B, {', '.join(map(str, shape_tail))}), got {tuple(t.shape)}")


def _check_window(t, channels, multiple, what):
    if t.dim() != 4 or t.shape[1] != channels or t.shape[-2] % multiple or t.shape[-1] % multiple:
        raise ShapeMismatch(f"{what}: expected (B, {channels}, H, W) with H, W multiples of {multiple}, "
                            f"got {tuple(t.shape)}")


def encode_watermark(w: torch.Tensor, nets: WatermarkNets) -> torch.Tensor:
    """(B, 1, 256, 256) binary watermark -> (B, 1, 64, 64) signal in [-1, 1]."""
    s = nets.spec
    _check(w, (1, s.watermark_size, s.watermark_size), "watermark")
    return nets.enc(w.to(next(nets.parameters()).dtype))


def extract_watermark(x: torch.Tensor, nets: WatermarkNets, window: bool = False) -> torch.Tensor:
    """(B, 3, 512, 512) image -> (B, 1, 256, 256) watermark estimate in [0, 1].

    With ``window`` the extractor runs fully convolutionally on any image
    window whose sides divide by its total downsampling; training uses this.
    """
    s = nets.spec
    if window:
        _check_window(x, s.image_channels, (s.image_size // s.watermark_size) * 2 ** s.decoder_unet.levels,
                      "image window")
    else:
        _check(x, (s.image_channels, s.image_size, s.image_size), "image")
    return torch.sigmoid(nets.dec(nets.ext(x)))


def fuse_latent(z: torch.Tensor, rho: torch.Tensor, cfg: FusionConfig) -> torch.Tensor:
    """Add ``alpha * rho`` to channel ``kappa`` of ``z``; other channels pass through.

    Equivalent to masking with the Kronecker delta over channels. ``z`` is not
    modified in place.
    """
    if z.dim() != 4:
        raise ShapeMismatch(f"latent must be (B, C, H, W), got {tuple(z.shape)}")
    cfg.check_channels(z.shape[1])
    if rho.dim() == 3:
        rho = rho.unsqueeze(1)
    if rho.shape[1] != 1 or rho.shape[-2:] != z.shape[-2:] or rho.shape[0] not in (1, z.shape[0]):
        raise ShapeMismatch(f"watermark signal {tuple(rho.shape)} does not match latent {tuple(z.shape)}")
    carried = z[:, cfg.kappa:cfg.kappa + 1] + cfg.alpha * rho
    parts = [z[:, :cfg.kappa], carried, z[:, cfg.kappa + 1:]]
    return torch.cat(parts, dim=1)


def channel_mask(channels: int, kappa: int) -> torch.Tensor:
    """Kronecker delta vector selecting the carrier channel."""
    if not 0 <= kappa < channels:
        raise BadChannel(f"kappa={kappa} out of range for {channels} channels")
    return (torch.arange(channels) == kappa).to(torch.float32)


def count_parameters(module: nn.Module | WatermarkNetSpec | None) -> int:
    """Number of trainable scalars. Accepts a module or a spec (materialized on the fly)."""
    if module is None:
        return 0
    if isinstance(module, WatermarkNetSpec):
        module = WatermarkNets(module)
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(path, nets: WatermarkNets, fusion: FusionConfig, train_config: dict | None = None,
                    extra: dict | None = None) -> None:
    """Single-file archive: a flat ``enc.* / ext.* / dec.*`` tensor map plus metadata."""
    payload = {
        "format": CKPT_FORMAT,
        "state": {k: v.detach().cpu().clone() for k, v in nets.state_dict().items()},
        "spec": nets.spec.to_dict(),
        "fusion": asdict(fusion),
        "train_config_hash": config_hash(train_config or {}),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, map_location="cpu") -> tuple[WatermarkNets, FusionConfig, dict]:
    payload = torch.load(path, map_location=map_location, weights_only=False)
    if payload.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path}: not a watermark checkpoint")
    nets = WatermarkNets(WatermarkNetSpec.from_dict(payload["spec"]))
    nets.load_state_dict(payload["state"])
    nets.eval()
    return nets, FusionConfig(**payload["fusion"]), payload


def checkpoint_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]
