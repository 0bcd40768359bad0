"""Generative backends the watermark plugs into.

A backend exposes three operations: ``denoise_to_latent`` (prompt -> final
denoised latent), ``decode_latent`` (latent -> pixels) and ``encode_image``
(pixels -> latent, training only). Nothing here is ever trained by the
watermark code; ``weight_hash`` lets callers prove that.

``PatchPCAAutoencoder`` is the desk-scale stand-in for a pretrained VAE: the
optimal linear autoencoder of 8x8 RGB patches, fitted on a corpus once and
frozen. ``StubDiffusionBackend`` pairs it with a deterministic toy denoiser.
``DiffusersBackend`` wraps a real Stable Diffusion pipeline when one is
installed.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BackendUnavailable, GeometryMismatch

WEIGHTS_ENV = "MARKPLUGGER_WEIGHTS"


def weights_dir() -> Path:
    """Cache directory for backend weights (``$MARKPLUGGER_WEIGHTS`` or ``~/.cache/markplugger``)."""
    return Path(os.environ.get(WEIGHTS_ENV, Path.home() / ".cache" / "markplugger"))


@runtime_checkable
class DiffusionBackend(Protocol):
    identifier: str
    latent_shape: tuple  # (c1, h, w)
    image_shape: tuple  # (c2, H, W)

    def denoise_to_latent(self, prompt: str, steps: int, seed: int) -> torch.Tensor: ...

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor: ...

    def encode_image(self, x: torch.Tensor) -> torch.Tensor: ...

    def weight_hash(self) -> str: ...


def tensor_hash(tensors) -> str:
    h = hashlib.sha256()
    for name, t in tensors:
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


class PatchPCAAutoencoder(nn.Module):
    """Frozen linear autoencoder: 8x8x3 patches projected on their top principal axes.

    Latents are divided by one global scale factor so that they have unit
    variance overall, the same convention Stable Diffusion uses for its VAE.
    """

    def __init__(self, basis: torch.Tensor, mean: torch.Tensor, scale: float, patch: int = 8):
        super().__init__()
        c = basis.shape[1]
        self.patch = patch
        self.register_buffer("kernel", basis.T.reshape(c, 3, patch, patch).contiguous())
        self.register_buffer("mean", mean.reshape(1, 3, patch, patch).contiguous())
        self.register_buffer("scale", torch.tensor(float(scale)))
        self.requires_grad_(False)

    @property
    def channels(self) -> int:
        return self.kernel.shape[0]

    def _tiled_mean(self, h, w):
        return self.mean.repeat(1, 1, h // self.patch, w // self.patch)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        x = x - self._tiled_mean(*x.shape[-2:])
        return F.conv2d(x, self.kernel, stride=self.patch) / self.scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        x = F.conv_transpose2d(z * self.scale, self.kernel, stride=self.patch)
        return x + self._tiled_mean(*x.shape[-2:])

    def weight_hash(self) -> str:
        return tensor_hash(sorted(self.state_dict().items()))

    @classmethod
    def fit(cls, images, channels: int = 4, patch: int = 8, max_patches: int = 400_000,
            seed: int = 0) -> "PatchPCAAutoencoder":
        """Fit on an iterable of HxWx3 float images in [0, 1]."""
        rng = np.random.default_rng(seed)
        chunks, total = [], 0
        for img in images:
            t = torch.as_tensor(np.ascontiguousarray(img), dtype=torch.float64).permute(2, 0, 1)
            p = F.unfold(t[None], patch, stride=patch)[0].T  # (n, 3*patch*patch), channel-major
            keep = rng.choice(p.shape[0], size=min(p.shape[0], 1024), replace=False)
            chunks.append(p[torch.as_tensor(keep)])
            total += len(keep)
            if total >= max_patches:
                break
        data = torch.cat(chunks)
        mean = data.mean(0)
        cov = torch.cov((data - mean).T)
        evals, evecs = torch.linalg.eigh(cov)
        order = torch.argsort(evals, descending=True)[:channels]
        basis, var = evecs[:, order], evals[order]
        # Deterministic sign: largest-magnitude entry of each axis is positive.
        idx = basis.abs().argmax(0)
        basis = basis * torch.sign(basis[idx, torch.arange(channels)])
        scale = float(var.mean().sqrt())
        return cls(basis.float(), mean.float(), scale, patch)

    def save(self, path) -> None:
        torch.save({"kernel": self.kernel, "mean": self.mean, "scale": self.scale, "patch": self.patch}, path)

    @classmethod
    def load(cls, path) -> "PatchPCAAutoencoder":
        d = torch.load(path, map_location="cpu", weights_only=True)
        c, _, p, _ = d["kernel"].shape
        basis = d["kernel"].reshape(c, -1).T
        return cls(basis, d["mean"].reshape(-1), float(d["scale"]), int(d["patch"]))


def desk_autoencoder(n_images: int = 200, seed: int = 0, cache: bool = True) -> PatchPCAAutoencoder:
    """Fit (or load from the weights cache) the desk autoencoder on a synthetic corpus."""
    from .data import DeskCorpus

    path = weights_dir() / f"desk_pca_ae_{n_images}_{seed}.pt"
    if cache and path.is_file():
        return PatchPCAAutoencoder.load(path)
    corpus = DeskCorpus(n_images, seed=10_000 + seed)
    ae = PatchPCAAutoencoder.fit((corpus[i][0] for i in range(len(corpus))), seed=seed)
    if cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        ae.save(path)
    return ae


class StubDiffusionBackend:
    """Deterministic fake text-to-image model over a frozen autoencoder.

    The "denoiser" synthesizes a scene from (prompt, seed, variant) with the
    procedural generator, encodes it, and walks ``steps`` deterministic
    updates from seeded Gaussian noise to that latent. Two variants share the
    autoencoder but produce different images for the same prompt, like two
    model versions sharing one VAE.
    """

    def __init__(self, autoencoder: PatchPCAAutoencoder, variant: str = "v1", image_size: int = 512):
        self.ae = autoencoder
        self.variant = variant
        self.identifier = f"stub-{variant}"
        self.image_shape = (3, image_size, image_size)
        self.latent_shape = (autoencoder.channels, image_size // autoencoder.patch, image_size // autoencoder.patch)
        g = torch.Generator().manual_seed(int(hashlib.sha256(variant.encode()).hexdigest()[:8], 16))
        # Stands in for the denoiser's weights: a fixed, spatially smooth latent bias per variant.
        c, h, w = self.latent_shape
        coarse = torch.randn((1, c, 4, 4), generator=g)
        self.prior = 0.05 * F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=False)[0]

    def _scene(self, prompt: str, seed: int) -> np.ndarray:
        from .data import _photo_crop, _procedural

        digest = hashlib.sha256(f"{self.variant}|{seed}|{prompt}".encode()).digest()
        rng = np.random.default_rng(list(digest[:16]))
        size = self.image_shape[1]
        return (_photo_crop if self.variant.endswith("photo") else _procedural)(rng, size)[0]

    @torch.no_grad()
    def denoise_to_latent(self, prompt: str, steps: int = 30, seed: int = 0) -> torch.Tensor:
        target = self.encode_image(torch.from_numpy(self._scene(prompt, seed)).permute(2, 0, 1)[None])
        target = target + self.prior
        g = torch.Generator().manual_seed(int(seed))
        z = torch.randn((1, *self.latent_shape), generator=g)
        for t in range(steps):
            z = z + (target - z) / (steps - t)
        return z

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        if tuple(z.shape[1:]) != self.latent_shape:
            raise GeometryMismatch(f"{self.identifier} expects latents {self.latent_shape}, got {tuple(z.shape[1:])}")
        return self.ae.decode(z)

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.image_shape:
            raise GeometryMismatch(f"{self.identifier} expects images {self.image_shape}, got {tuple(x.shape[1:])}")
        return self.ae.encode(x)

    def weight_hash(self) -> str:
        return tensor_hash(sorted(self.ae.state_dict().items()) + [("prior", self.prior)])


class DiffusersBackend:
    """Stable Diffusion through the ``diffusers`` package, fusing after the last denoising step.

    Weights are resolved from ``model_id`` (a hub id or local directory); the
    hub cache honours ``$MARKPLUGGER_WEIGHTS``.
    """

    def __init__(self, model_id: str, device: str = "cpu", dtype=torch.float32):
        try:
            from diffusers import DDPMScheduler, StableDiffusionPipeline
        except ImportError as e:
            raise BackendUnavailable("the diffusers package is not installed") from e
        try:
            pipe = StableDiffusionPipeline.from_pretrained(model_id, torch_dtype=dtype,
                                                           cache_dir=str(weights_dir()))
        except Exception as e:  # network, missing files, auth
            raise BackendUnavailable(f"cannot load {model_id}: {e}") from e
        pipe.scheduler = DDPMScheduler.from_config(pipe.scheduler.config)
        pipe.set_progress_bar_config(disable=True)
        for module in (pipe.vae, pipe.unet, pipe.text_encoder):
            module.requires_grad_(False)
        self.pipe = pipe.to(device)
        self.device = device
        self.identifier = f"diffusers:{model_id}"
        self.sf = pipe.vae.config.scaling_factor
        size = pipe.unet.config.sample_size * pipe.vae_scale_factor
        self.image_shape = (3, size, size)
        self.latent_shape = (pipe.unet.config.in_channels, pipe.unet.config.sample_size, pipe.unet.config.sample_size)

    @torch.no_grad()
    def denoise_to_latent(self, prompt: str, steps: int = 30, seed: int = 0) -> torch.Tensor:
        g = torch.Generator(self.device).manual_seed(int(seed))
        out = self.pipe(prompt, num_inference_steps=steps, generator=g, output_type="latent")
        return out.images.float().cpu()

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        vae = self.pipe.vae
        x = vae.decode(z.to(self.device, vae.dtype) / self.sf).sample
        return (x.float() + 1.0) / 2.0

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        vae = self.pipe.vae
        dist = vae.encode(x.to(self.device, vae.dtype) * 2.0 - 1.0).latent_dist
        return dist.mean.float() * self.sf

    def weight_hash(self) -> str:
        p = self.pipe
        return tensor_hash((f"{prefix}.{k}", v) for prefix, m in (("vae", p.vae), ("unet", p.unet))
                           for k, v in sorted(m.state_dict().items()))


def make_backend(name: str, ae: PatchPCAAutoencoder | None = None):
    """``stub-v1`` / ``stub-v2`` / ``stub-photo`` or ``diffusers:<model id>``."""
    if name.startswith("stub-"):
        return StubDiffusionBackend(ae or desk_autoencoder(), variant=name[len("stub-"):])
    if name.startswith("diffusers:"):
        return DiffusersBackend(name[len("diffusers:"):])
    raise BackendUnavailable(f"unknown backend {name!r}")
