"""Image distortions used for robustness training and evaluation.

All attacks take (B, 3, H, W) tensors in [0, 1] (or a single HxWx3 numpy
image) and return the same shape clamped to [0, 1]. Every kind is a no-op at
its identity intensity. Blur, noise, brightness, rotation and crop are
differentiable in the image; salt-and-pepper passes gradients straight
through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import BadIntensity

KINDS = ("gaussian_blur", "gaussian_noise", "brightness", "crop", "rotation", "salt_pepper")

# Evaluation domains; crop is the side of the kept square in pixels.
DOMAINS = {
    "gaussian_blur": (0.0, 3.0),
    "gaussian_noise": (0.0, 0.15),
    "brightness": (0.5, 1.5),
    "crop": (256.0, 512.0),
    "rotation": (0.0, 90.0),
    "salt_pepper": (0.0, 0.1),
}
IDENTITY = {
    "gaussian_blur": 0.0,
    "gaussian_noise": 0.0,
    "brightness": 1.0,
    "crop": 512.0,
    "rotation": 0.0,
    "salt_pepper": 0.0,
}
DIFFERENTIABLE = ("gaussian_blur", "gaussian_noise", "brightness", "rotation", "crop")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "identity"
    intensity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind == "identity":
            return
        if self.kind not in DOMAINS:
            raise BadIntensity(f"unknown attack kind {self.kind!r}")
        lo, hi = DOMAINS[self.kind]
        if not lo <= float(self.intensity) <= hi:
            raise BadIntensity(f"{self.kind} intensity {self.intensity} outside [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "intensity": float(self.intensity), "seed": int(self.seed)}


def _default_ranges():
    return {
        "gaussian_blur": (0.0, 1.5),
        "gaussian_noise": (0.0, 0.08),
        "brightness": (0.8, 1.2),
        "crop": (320.0, 512.0),
        "rotation": (0.0, 15.0),
        "salt_pepper": (0.0, 0.03),
    }


def _default_probs():
    p = {"identity": 0.5}
    p.update({k: 0.5 / len(KINDS) for k in KINDS})
    return p


@dataclass(frozen=True)
class AttackSchedule:
    """Per-kind selection probabilities (including ``identity``) and intensity ranges."""

    probabilities: dict = field(default_factory=_default_probs)
    ranges: dict = field(default_factory=_default_ranges)

    def __post_init__(self):
        total = sum(self.probabilities.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"attack probabilities sum to {total}, not 1")
        for kind, p in self.probabilities.items():
            if p < 0:
                raise ValueError(f"negative probability for {kind}")
            if kind == "identity":
                continue
            if kind not in DOMAINS:
                raise BadIntensity(f"unknown attack kind {kind!r}")
            lo, hi = self.ranges[kind]
            dlo, dhi = DOMAINS[kind]
            if not dlo <= lo <= hi <= dhi:
                raise BadIntensity(f"{kind} range [{lo}, {hi}] outside domain [{dlo}, {dhi}]")

    @classmethod
    def only(cls, kind: str, lo: float | None = None, hi: float | None = None) -> "AttackSchedule":
        if kind == "identity":
            return cls(probabilities={"identity": 1.0}, ranges={})
        lo = DOMAINS[kind][0] if lo is None else lo
        hi = DOMAINS[kind][1] if hi is None else hi
        return cls(probabilities={kind: 1.0}, ranges={kind: (lo, hi)})

    def to_dict(self) -> dict:
        return {"probabilities": dict(self.probabilities),
                "ranges": {k: list(v) for k, v in self.ranges.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSchedule":
        return cls(probabilities=dict(d["probabilities"]),
                   ranges={k: tuple(v) for k, v in d.get("ranges", {}).items()})


def sample_attack(schedule: AttackSchedule, rng: np.random.Generator) -> AttackSpec:
    kinds = list(schedule.probabilities)
    probs = np.array([schedule.probabilities[k] for k in kinds], dtype=np.float64)
    kind = kinds[rng.choice(len(kinds), p=probs / probs.sum())]
    seed = int(rng.integers(2**31))
    if kind == "identity":
        return AttackSpec("identity", 0.0, seed)
    lo, hi = schedule.ranges[kind]
    return AttackSpec(kind, float(rng.uniform(lo, hi)), seed)


def attack_sweep_grid(kinds=KINDS, levels_per_kind: int = 5) -> list:
    """Evenly spaced evaluation grid per kind, weakest first.

    Crop strength grows as the kept square shrinks, so its grid runs from 512 down.
    """
    if levels_per_kind < 2:
        raise ValueError("need at least two levels per kind")
    specs = []
    for kind in kinds:
        lo, hi = DOMAINS[kind]
        values = np.linspace(lo, hi, levels_per_kind)
        if kind == "crop":
            values = values[::-1]
        specs.extend(AttackSpec(kind, float(v)) for v in values)
    return specs


def _gaussian_kernel(sigma: float, dtype) -> torch.Tensor:
    # float64 so tiny sigmas collapse to a delta instead of 0/0
    radius = math.ceil(3 * sigma)
    t = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    return (k / k.sum()).to(dtype)


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    if sigma == 0:
        return x
    k = _gaussian_kernel(sigma, x.dtype).to(x.device)
    c = x.shape[1]
    r = k.numel() // 2
    mode = "reflect" if r < min(x.shape[-2:]) else "replicate"
    y = F.pad(x, (r, r, 0, 0), mode=mode)
    y = F.conv2d(y, k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    y = F.pad(y, (0, 0, r, r), mode=mode)
    return F.conv2d(y, k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)


def gaussian_noise(x: torch.Tensor, sigma: float, seed: int = 0) -> torch.Tensor:
    if sigma == 0:
        return x
    g = torch.Generator(device="cpu").manual_seed(int(seed))
    noise = torch.randn(x.shape, generator=g, dtype=x.dtype).to(x.device)
    return x + sigma * noise


def brightness(x: torch.Tensor, factor: float) -> torch.Tensor:
    if factor == 1:
        return x
    return x * factor


def center_crop(x: torch.Tensor, size: float) -> torch.Tensor:
    """Keep the centred ``size x size`` square on a zero canvas of the original size."""
    h, w = x.shape[-2:]
    s = int(round(size))
    if s >= min(h, w):
        return x
    top, left = (h - s) // 2, (w - s) // 2
    mask = torch.zeros((h, w), dtype=x.dtype, device=x.device)
    mask[top:top + s, left:left + s] = 1.0
    return x * mask


def rotate(x: torch.Tensor, degrees: float) -> torch.Tensor:
    """Bilinear rotation about the image centre with zero fill."""
    if degrees == 0:
        return x
    t = math.radians(degrees)
    theta = torch.tensor([[math.cos(t), -math.sin(t), 0.0], [math.sin(t), math.cos(t), 0.0]],
                         dtype=x.dtype, device=x.device)
    grid = F.affine_grid(theta.expand(x.shape[0], 2, 3), list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def salt_pepper(x: torch.Tensor, density: float, seed: int = 0) -> torch.Tensor:
    if density == 0:
        return x
    g = torch.Generator(device="cpu").manual_seed(int(seed))
    b, _, h, w = x.shape
    u = torch.rand((b, 1, h, w), generator=g, dtype=x.dtype).to(x.device)
    hit = (u < density).to(x.dtype)
    salt = (u < density / 2).to(x.dtype)
    noisy = x * (1 - hit) + salt * hit
    return x + (noisy - x).detach()


def _clamp(x: torch.Tensor) -> torch.Tensor:
    return x.clamp(0.0, 1.0)


def apply_attack(img, spec: AttackSpec):
    """Distort ``img`` according to ``spec``. Identity settings return the input object unchanged."""
    if isinstance(img, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1)[None]
        out = apply_attack(t, spec)
        return out[0].permute(1, 2, 0).numpy()
    kind, n = spec.kind, float(spec.intensity)
    if kind == "identity" or n == IDENTITY[kind]:
        return img
    if kind == "gaussian_blur":
        out = gaussian_blur(img, n)
    elif kind == "gaussian_noise":
        out = gaussian_noise(img, n, spec.seed)
    elif kind == "brightness":
        out = brightness(img, n)
    elif kind == "crop":
        out = center_crop(img, n)
    elif kind == "rotation":
        out = rotate(img, n)
    elif kind == "salt_pepper":
        out = salt_pepper(img, n, spec.seed)
    else:
        raise BadIntensity(f"unknown attack kind {kind!r}")
    return _clamp(out)
