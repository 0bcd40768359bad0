"""Image/caption corpora.

``DeskCorpus`` synthesizes captioned 512x512 images deterministically from a
seed: random crops of the photographs bundled with scikit-image, mixed with
procedural scenes of colored shapes over gradients and textures. ``ImageFolder``
reads a directory of images plus a ``captions.json`` table, the layout a
COCO-style subset would be exported to.
"""

from __future__ import annotations

import hashlib
import json
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError

IMAGE_SIZE = 512
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}

_PHOTOS = {
    "astronaut": "an astronaut posing in front of a flag",
    "chelsea": "a tabby cat looking at the camera",
    "coffee": "a cup of coffee on a saucer",
    "rocket": "a rocket on a launch pad",
    "immunohistochemistry": "a stained tissue sample under a microscope",
    "hubble_deep_field": "galaxies in the deep night sky",
    "retina": "a photograph of the back of an eye",
    "stereo_motorcycle": "a red motorcycle parked indoors",
    "coins": "old coins laid out on a table",
    "camera": "a man with a camera on a tripod",
    "moon": "the surface of the moon",
    "horse": "the silhouette of a horse",
    "brick": "a brick wall",
    "grass": "a patch of grass",
    "gravel": "gravel on the ground",
    "cell": "a cell seen through a microscope",
}
_TEXTURES = ("brick", "grass", "gravel")
_COLORS = {
    "red": (0.85, 0.15, 0.12), "green": (0.2, 0.65, 0.25), "blue": (0.15, 0.3, 0.8),
    "yellow": (0.95, 0.85, 0.2), "orange": (0.95, 0.55, 0.1), "purple": (0.55, 0.25, 0.65),
    "white": (0.95, 0.95, 0.95), "black": (0.08, 0.08, 0.08), "gray": (0.5, 0.5, 0.5),
    "brown": (0.5, 0.32, 0.18), "pink": (0.95, 0.6, 0.7), "teal": (0.1, 0.55, 0.55),
}
_SHAPES = ("circle", "square", "triangle", "ellipse", "stripe")
_SIZES = ("small", "large", "")
_PHOTO_PREFIXES = ("a photo of", "a close up of", "a picture showing", "an image of", "a cropped view of")


@lru_cache(maxsize=None)
def _photo(name: str) -> np.ndarray:
    import skimage.data

    img = getattr(skimage.data, name)()
    if isinstance(img, tuple):
        img = img[0]
    img = np.asarray(img, dtype=np.float32)
    if img.max() > 1.0:
        img = img / 255.0
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    return np.ascontiguousarray(img[..., :3])


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    from skimage.transform import resize

    return resize(img, (size, size), order=1, anti_aliasing=True).astype(np.float32)


def _photo_crop(rng: np.random.Generator, size: int) -> tuple[np.ndarray, str]:
    name = list(_PHOTOS)[rng.integers(len(_PHOTOS))]
    src = _photo(name)
    h, w = src.shape[:2]
    side = int(min(h, w) * rng.uniform(0.45, 1.0))
    y = rng.integers(0, h - side + 1)
    x = rng.integers(0, w - side + 1)
    img = _resize(src[y:y + side, x:x + side], size)
    if rng.random() < 0.5:
        img = img[:, ::-1]
    gain = rng.uniform(0.85, 1.15, size=3).astype(np.float32)
    img = np.clip(img * gain + rng.uniform(-0.05, 0.05), 0, 1)
    caption = f"{_PHOTO_PREFIXES[rng.integers(len(_PHOTO_PREFIXES))]} {_PHOTOS[name]}"
    return img, caption


def _shape_mask(kind: str, yy, xx, rng, size: int) -> np.ndarray:
    cy, cx = rng.uniform(0.15, 0.85, size=2) * size
    r = rng.uniform(0.07, 0.25) * size
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if kind == "ellipse":
        a, b = r, r * rng.uniform(0.3, 0.7)
        t = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
        v = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
        return (u / a) ** 2 + (v / b) ** 2 <= 1
    if kind == "triangle":
        return (yy - cy <= r) & (np.abs(xx - cx) <= (yy - (cy - r)) / 2)
    t = rng.uniform(0, np.pi)
    d = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
    return np.abs(d) <= r * 0.25


def _procedural(rng: np.random.Generator, size: int) -> tuple[np.ndarray, str]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    names = list(_COLORS)
    bg_name = names[rng.integers(len(names))]
    c0 = np.array(_COLORS[bg_name], dtype=np.float32)
    c1 = np.clip(c0 + rng.uniform(-0.3, 0.3, 3), 0, 1).astype(np.float32)
    t = rng.uniform(0, 2 * np.pi)
    ramp = ((xx * np.cos(t) + yy * np.sin(t)) / size + 1.0) / 2.0
    img = c0 * (1 - ramp[..., None]) + c1 * ramp[..., None]
    background = f"{bg_name} background"
    if rng.random() < 0.4:
        tex_name = _TEXTURES[rng.integers(len(_TEXTURES))]
        tex = _resize(_photo(tex_name), size).mean(-1, keepdims=True)
        img = np.clip(img * (0.5 + tex), 0, 1)
        background = f"{bg_name} {tex_name} background"
    parts = []
    for _ in range(rng.integers(1, 5)):
        kind = _SHAPES[rng.integers(len(_SHAPES))]
        cname = names[rng.integers(len(names))]
        mask = _shape_mask(kind, yy, xx, rng, size)
        mask = ndimage.gaussian_filter(mask.astype(np.float32), 1.0)[..., None]
        color = np.array(_COLORS[cname], dtype=np.float32)
        shade = 1.0 - 0.3 * ramp[..., None] * rng.random()
        img = img * (1 - mask) + color * shade * mask
        adj = _SIZES[rng.integers(len(_SIZES))]
        parts.append(" ".join(w for w in ("a", adj, cname, kind) if w))
    img = img + rng.normal(0, 0.01, img.shape).astype(np.float32)
    shapes = parts[0] if len(parts) == 1 else ", ".join(parts[:-1]) + " and " + parts[-1]
    return np.clip(img, 0, 1).astype(np.float32), f"{shapes} on a {background}"


class DeskCorpus:
    """Deterministic synthetic corpus; item ``i`` depends only on (seed, i)."""

    def __init__(self, n: int, seed: int = 0, size: int = IMAGE_SIZE, photo_fraction: float = 0.5):
        self.n = n
        self.seed = seed
        self.size = size
        self.photo_fraction = photo_fraction

    def __len__(self):
        return self.n

    def __getitem__(self, i: int) -> tuple[np.ndarray, str]:
        if not 0 <= i < self.n:
            raise IndexError(i)
        rng = np.random.default_rng([self.seed, i])
        if rng.random() < self.photo_fraction:
            return _photo_crop(rng, self.size)
        return _procedural(rng, self.size)

    def fingerprint(self) -> str:
        return f"desk:{self.n}:{self.seed}:{self.size}:{self.photo_fraction}"


class ImageFolder:
    """Directory of images plus an optional ``captions.json`` {stem: caption} table.

    Without captions, prompts are synthesized from the file stem.
    """

    def __init__(self, root, captions=None, size: int = IMAGE_SIZE):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DataError(f"dataset directory not found: {self.root}")
        self.files = sorted(p for p in self.root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not self.files:
            raise DataError(f"no images in {self.root}")
        cap_path = Path(captions) if captions else self.root / "captions.json"
        if captions and not cap_path.is_file():
            raise DataError(f"captions file not found: {cap_path}")
        self.captions = json.loads(cap_path.read_text()) if cap_path.is_file() else {}
        self.size = size

    def __len__(self):
        return len(self.files)

    def __getitem__(self, i: int) -> tuple[np.ndarray, str]:
        from PIL import Image

        path = self.files[i]
        img = Image.open(path).convert("RGB")
        if img.size != (self.size, self.size):
            img = img.resize((self.size, self.size), Image.BICUBIC)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        caption = self.captions.get(path.stem) or f"an image named {path.stem.replace('_', ' ')}"
        return arr, caption

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.files:
            st = p.stat()
            h.update(f"{p.name}:{st.st_size}".encode())
        h.update(json.dumps(self.captions, sort_keys=True).encode())
        return "folder:" + h.hexdigest()[:16]


def write_corpus(corpus, out_dir, fmt: str = "png") -> Path:
    """Materialize a corpus as ``out_dir/{i:05d}.{fmt}`` plus ``captions.json``."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    captions = {}
    for i in range(len(corpus)):
        img, cap = corpus[i]
        stem = f"{i:05d}"
        Image.fromarray((np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)).save(out / f"{stem}.{fmt}")
        captions[stem] = cap
    (out / "captions.json").write_text(json.dumps(captions, indent=1, sort_keys=True) + "\n")
    return out


def open_dataset(spec: str, captions=None, size: int = IMAGE_SIZE):
    """``desk:N[:seed]`` builds a synthetic corpus; anything else is a folder path."""
    if spec.startswith("desk:"):
        parts = spec.split(":")
        n = int(parts[1])
        seed = int(parts[2]) if len(parts) > 2 else 0
        return DeskCorpus(n, seed=seed, size=size)
    return ImageFolder(spec, captions=captions, size=size)


def split_indices(n: int, eval_fraction: float, seed: int) -> tuple[list, list]:
    """Fixed train/held-out split of ``range(n)``."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    k = max(1, int(round(n * eval_fraction)))
    return sorted(perm[k:].tolist()), sorted(perm[:k].tolist())
