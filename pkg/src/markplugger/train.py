"""Training loop for the watermark encoder and extractor.

Each step encodes real images with the frozen backend encoder, renders a fresh
payload per image, fuses, decodes, optionally attacks, extracts, and updates
only the watermark nets under the robustness-augmented loss.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .attacks import AttackSchedule, AttackSpec, apply_attack, center_crop, sample_attack
from .backend import make_backend
from .data import open_dataset, split_indices
from .errors import DataError, NonFiniteLoss
from .losses import LossWeights, PerceptualConfig, loss_terms, weighted_total
from .nets import (FusionConfig, WatermarkNets, WatermarkNetSpec, checkpoint_hash, config_hash, count_parameters,
                   extract_watermark, fuse_latent, load_checkpoint, save_checkpoint)
from .payload import DEFAULT_LAYOUT, GlyphLayout, payload_text, render_payload
from .pipeline import evaluate_latents, latents_from_corpus, random_meta, to_nchw

OPTIMIZERS = ("adam", "adamw", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = "desk:1000"
    captions: str | None = None
    epochs: int = 1
    batch_size: int = 16
    lr: float = 1e-4
    optimizer: str = "adam"
    weights: LossWeights = field(default_factory=LossWeights)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    attacks: AttackSchedule = field(default_factory=AttackSchedule)
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)
    spec: WatermarkNetSpec = field(default_factory=WatermarkNetSpec)
    backend: str = "stub-v1"
    seed: int = 0
    checkpoint_every: int = 100
    eval_fraction: float = 0.05
    out_dir: str = "runs/train"
    max_steps: int | None = None
    deterministic: bool = False
    quantize_eval: bool = True
    window: int | None = None
    windows_per_image: int = 1
    steps_per_image: int = 1

    def validate(self) -> None:
        """Cheap checks that must pass before any weights are allocated."""
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 0 < self.eval_fraction < 1:
            raise ValueError(f"eval_fraction must lie in (0, 1), got {self.eval_fraction}")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.steps_per_image < 1 or self.windows_per_image < 1:
            raise ValueError("steps_per_image and windows_per_image must be >= 1")
        if self.window is not None:
            unit = DEFAULT_LAYOUT.cell_h * self.spec.image_size // self.spec.watermark_size
            if not (0 < self.window <= self.spec.image_size and self.window % unit == 0):
                raise ValueError(f"window must be a multiple of {unit} no larger than {self.spec.image_size}")
        self.fusion.check_channels(self.spec.latent_channels)
        self.weights.check_balance()
        if not self.dataset.startswith("desk:") and not Path(self.dataset).is_dir():
            raise DataError(f"dataset directory not found: {self.dataset}")
        if self.captions is not None and not Path(self.captions).is_file():
            raise DataError(f"captions file not found: {self.captions}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("dataset", "captions", "epochs", "batch_size", "lr", "optimizer",
                                           "backend", "seed", "checkpoint_every", "eval_fraction", "out_dir",
                                           "max_steps", "deterministic", "quantize_eval", "window",
                                           "windows_per_image", "steps_per_image")}
        d["weights"] = asdict(self.weights)
        d["fusion"] = asdict(self.fusion)
        d["attacks"] = self.attacks.to_dict()
        d["perceptual"] = self.perceptual.to_dict()
        d["spec"] = self.spec.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"]) if "weights" in d else LossWeights()
        d["fusion"] = FusionConfig(**d["fusion"]) if "fusion" in d else FusionConfig()
        d["attacks"] = AttackSchedule.from_dict(d["attacks"]) if "attacks" in d else AttackSchedule()
        if "perceptual" in d:
            p = dict(d["perceptual"])
            p["layer_weights"] = tuple(p["layer_weights"])
            d["perceptual"] = PerceptualConfig(**p)
        d["spec"] = WatermarkNetSpec.from_dict(d["spec"]) if "spec" in d else WatermarkNetSpec()
        return cls(**d)

    def hash(self) -> str:
        """Identity of the training recipe; output location and step cap are excluded."""
        d = self.to_dict()
        for k in ("out_dir", "checkpoint_every", "max_steps"):
            d.pop(k)
        return config_hash(d)


@dataclass
class TrainStepRecord:
    step: int
    raw: dict
    weighted: dict
    total: float
    attack: dict
    grad_norm: float
    wall_ms: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingBatch:
    x: torch.Tensor  # (B, 3, H, W) images in [0, 1]
    z: torch.Tensor  # (B, C, h, w) latents from the frozen encoder
    w: torch.Tensor  # (B, 1, 256, 256) rendered payloads
    metas: list
    truncated: list
    indices: list
    windows: list | None = None  # (sample, top, left) in watermark pixels; size in ``window_size``
    window_size: int | None = None


@torch.no_grad()
def build_training_batch(images, captions, rng: np.random.Generator, backend,
                         layout: GlyphLayout = DEFAULT_LAYOUT, indices=None, clock=None,
                         window: int | None = None, windows_per_image: int = 1) -> TrainingBatch:
    """Encode ``images`` (HxWx3 arrays) and render one fresh payload per image.

    The user ID is uniform over 0..9. Timestamps are drawn from ``rng`` so
    that a seed fixes the whole metadata sequence; pass ``clock`` (a callable
    returning a datetime) to stamp the wall-clock time instead.

    With ``window`` (image pixels) the batch also carries ``windows_per_image``
    cell-aligned extraction windows per sample, drawn among windows that
    contain ink when there are any.
    """
    x = torch.cat([to_nchw(img) for img in images])
    z = backend.encode_image(x)
    metas, truncated, ws = [], [], []
    for cap in captions:
        meta = random_meta(cap, rng)
        if clock is not None:
            meta = type(meta).now(cap, meta.user_id, clock())
        _, cut = payload_text(meta, layout)
        metas.append(meta)
        truncated.append(cut)
        ws.append(torch.from_numpy(render_payload(meta, layout)).permute(2, 0, 1).float())
    w = torch.stack(ws)
    windows, size = None, None
    if window is not None:
        size = window * w.shape[-1] // x.shape[-1]
        windows = [(b, *_pick_window(w[b, 0], size, layout.cell_h, rng)) for b in range(len(ws))
                   for _ in range(windows_per_image)]
    return TrainingBatch(x, z, w, metas, truncated, list(indices or range(len(images))), windows, size)


def _pick_window(w: torch.Tensor, size: int, cell: int, rng: np.random.Generator) -> tuple[int, int]:
    starts = range(0, w.shape[-1] - size + 1, cell)
    cands = [(t, l) for t in starts for l in starts]
    inked = [c for c in cands if w[c[0]:c[0] + size, c[1]:c[1] + size].any()]
    pool = inked or cands
    return pool[int(rng.integers(len(pool)))]


def _window_attack(x: torch.Tensor, attack: AttackSpec, full: int) -> torch.Tensor:
    """Attack an extraction window; crop sizes are rescaled to the window."""
    if attack.kind == "crop":
        return center_crop(x, attack.intensity * x.shape[-1] / full)
    return apply_attack(x, attack)


def _grad_norm(params) -> float:
    sq = [p.grad.detach().pow(2).sum() for p in params if p.grad is not None]
    return float(torch.stack(sq).sum().sqrt()) if sq else 0.0


def train_step(batch: TrainingBatch, nets: WatermarkNets, optimizer, backend, cfg: TrainConfig,
               attack: AttackSpec = AttackSpec(), step: int = 0) -> TrainStepRecord:
    """One update of the watermark nets; the backend only runs forward."""
    t0 = time.perf_counter()
    nets.train()
    with torch.no_grad():
        x_clean = backend.decode_latent(batch.z)
    rho = nets.encode(batch.w)
    x_marked = backend.decode_latent(fuse_latent(batch.z, rho, cfg.fusion))
    if batch.windows:
        k = batch.window_size
        r = x_marked.shape[-1] // batch.w.shape[-1]
        target = torch.stack([batch.w[b, :, t:t + k, l:l + k] for b, t, l in batch.windows])
        seen = torch.stack([x_marked[b, :, r * t:r * (t + k), r * l:r * (l + k)] for b, t, l in batch.windows])
        w_prime = extract_watermark(seen, nets, window=True)
        if attack.kind == "identity":
            w_hat = w_prime
        else:
            w_hat = extract_watermark(_window_attack(seen, attack, x_marked.shape[-1]), nets, window=True)
    else:
        target = batch.w
        w_prime = nets.extract(x_marked)
        if attack.kind == "identity":
            w_hat = w_prime
        else:
            w_hat = nets.extract(apply_attack(x_marked, attack))
    need_p = cfg.weights.gamma1 != 0
    terms = loss_terms(x_clean, x_marked, target, w_prime, w_hat, cfg.perceptual, need_perceptual=need_p)
    total = weighted_total(terms, cfg.weights)
    if not torch.isfinite(total):
        raise NonFiniteLoss(step, batch.indices[0] if batch.indices else -1)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    gn = _grad_norm(nets.parameters())
    optimizer.step()
    w = cfg.weights
    gammas = {"image_mse": w.gamma0, "perceptual": w.gamma1, "wm_mse": w.gamma2, "wm_attacked_mse": w.gamma3}
    raw = {k: float(v.detach()) for k, v in terms.items()}
    return TrainStepRecord(step=step, raw=raw, weighted={k: gammas[k] * raw[k] for k in raw},
                           total=float(total.detach()), attack=attack.to_dict(), grad_norm=gn,
                           wall_ms=(time.perf_counter() - t0) * 1e3)


def make_optimizer(name: str, params, lr: float):
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    if name == "adamw":
        return torch.optim.AdamW(params, lr=lr, weight_decay=0.0)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=0.9)
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class TrainResult:
    checkpoint: Path
    manifest: dict
    records: list


def _state_path(out: Path) -> Path:
    return out / "last.pt"


def _save(out: Path, nets, opt, cfg: TrainConfig, step: int, epoch: int, pos: int, order, rng,
          repeat: int = 0) -> Path:
    path = _state_path(out)
    tmp = path.with_suffix(".tmp")
    save_checkpoint(tmp, nets, cfg.fusion, cfg.to_dict(), extra={
        "recipe_hash": cfg.hash(), "step": step, "epoch": epoch, "position": pos, "repeat": repeat,
        "order": [int(i) for i in order],
        "rng": rng.bit_generator.state, "torch_rng": torch.get_rng_state(), "optimizer": opt.state_dict(),
    })
    tmp.replace(path)
    return path


def run_training(cfg: TrainConfig, resume: bool = True, progress=None) -> TrainResult:
    """Train, checkpoint every ``checkpoint_every`` steps, evaluate on the held-out split.

    Writes ``last.pt`` (resumable), ``final.pt``, ``log.jsonl`` and
    ``manifest.json`` under ``cfg.out_dir``. An existing ``last.pt`` with the
    same recipe hash is resumed when ``resume`` is true.
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = open_dataset(cfg.dataset, cfg.captions, size=cfg.spec.image_size)
    train_idx, eval_idx = split_indices(len(dataset), cfg.eval_fraction, cfg.seed)
    backend = make_backend(cfg.backend)
    backend_hash = backend.weight_hash()
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)
    nets = WatermarkNets(cfg.spec)
    census = sum(p.numel() for p in nets.parameters() if p.requires_grad)
    if census != count_parameters(cfg.spec):
        raise RuntimeError(f"trainable census {census} != count_parameters(spec)")
    opt = make_optimizer(cfg.optimizer, nets.parameters(), cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    step, epoch, pos, repeat, order = 0, 0, 0, 0, None
    log_path = out / "log.jsonl"
    if resume and _state_path(out).is_file():
        loaded, _, payload = load_checkpoint(_state_path(out))
        if payload["extra"].get("recipe_hash") != cfg.hash():
            raise ValueError(f"{_state_path(out)} was written by a different configuration")
        nets.load_state_dict(loaded.state_dict())
        extra = payload["extra"]
        opt.load_state_dict(extra["optimizer"])
        rng.bit_generator.state = extra["rng"]
        torch.set_rng_state(extra["torch_rng"])
        step, epoch, pos, order = extra["step"], extra["epoch"], extra["position"], extra["order"]
        repeat = extra.get("repeat", 0)
        _truncate_log(log_path, step)
    records, cached = [], None
    t_start = time.time()
    with open(log_path, "a") as log:
        while epoch < cfg.epochs:
            if order is None:
                order = rng.permutation(train_idx).tolist()
            while pos < len(order):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                idx = order[pos:pos + cfg.batch_size]
                if cached is None or cached[0] != idx:
                    cached = (idx, [dataset[i] for i in idx])
                items = cached[1]
                batch = build_training_batch([im for im, _ in items], [c for _, c in items], rng, backend,
                                             indices=idx, window=cfg.window,
                                             windows_per_image=cfg.windows_per_image)
                attack = sample_attack(cfg.attacks, rng)
                rec = train_step(batch, nets, opt, backend, cfg, attack, step)
                records.append(rec)
                log.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
                log.flush()
                step += 1
                repeat += 1
                if repeat == cfg.steps_per_image:
                    pos, repeat = pos + len(idx), 0
                if progress:
                    progress(rec)
                if step % cfg.checkpoint_every == 0:
                    _save(out, nets, opt, cfg, step, epoch, pos, order, rng, repeat)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            epoch, pos, order = epoch + 1, 0, None
    _save(out, nets, opt, cfg, step, epoch, pos, order or [], rng, repeat)
    train_seconds = time.time() - t_start

    samples = latents_from_corpus(backend, dataset, eval_idx, seed=cfg.seed)
    report, _ = evaluate_latents(samples, backend, nets, cfg.fusion, quantize=cfg.quantize_eval)
    if backend.weight_hash() != backend_hash:
        raise RuntimeError("backend weights changed during training")
    final = out / "final.pt"
    save_checkpoint(final, nets, cfg.fusion, cfg.to_dict(), extra={"step": step})
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "dataset_fingerprint": dataset.fingerprint(),
        "train_size": len(train_idx),
        "eval_indices": eval_idx,
        "backend": backend.identifier,
        "backend_hash": backend_hash,
        "parameters": census,
        "steps": step,
        "epochs_completed": epoch,
        "train_seconds": round(train_seconds, 1),
        "final_eval": report.to_dict(),
        "checkpoint": final.name,
        "checkpoint_hash": checkpoint_hash(final),
        "layout": DEFAULT_LAYOUT.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return TrainResult(final, manifest, records)


def _truncate_log(path: Path, step: int) -> None:
    """Drop log lines past the resumed step so the log stays strictly increasing."""
    if not path.is_file():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] < step]
    path.write_text("".join(ln + "\n" for ln in keep))


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)


def desk_recipe(kappa: int = 3, out_root=None, **overrides) -> TrainConfig:
    """The desk-scale acceptance recipe: one epoch over a 1000-image corpus.

    Batches hold one image; every image gets four updates with fresh payloads,
    each extracting from four 128-pixel windows. Output lands in
    ``<out_root>/desk_k<kappa>_<recipe hash>``.
    """
    from .backend import weights_dir

    cfg = TrainConfig(dataset="desk:1000", batch_size=1, lr=1e-3, fusion=FusionConfig(0.05, kappa),
                      checkpoint_every=200, window=128, windows_per_image=4, steps_per_image=4)
    cfg = replace(cfg, **overrides)
    root = Path(out_root) if out_root is not None else weights_dir() / "runs"
    return replace(cfg, out_dir=str(root / f"desk_k{kappa}_{cfg.hash()}"))


def train_or_load(cfg: TrainConfig, progress=None) -> tuple[WatermarkNets, FusionConfig, dict]:
    """Reuse a finished run in ``cfg.out_dir`` with the same recipe hash, else train (resuming if possible)."""
    out = Path(cfg.out_dir)
    manifest_path = out / "manifest.json"
    if manifest_path.is_file():
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("config_hash") == cfg.hash() and (out / "final.pt").is_file():
            nets, fusion, _ = load_checkpoint(out / "final.pt")
            return nets, fusion, manifest
    result = run_training(cfg, progress=progress)
    nets, fusion, _ = load_checkpoint(result.checkpoint)
    return nets, fusion, result.manifest
