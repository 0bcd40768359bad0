"""Rendering generation metadata as a binary glyph image and reading it back.

The watermark image is a 256x256 grid of 16x16 cells. Each character of the
payload ``prompt \\n user_id \\n timestamp`` occupies one cell in row-major
order, drawn from a 5x7 bitmap font scaled by two. Spaces and unused cells
are blank.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field

import numpy as np

from ._font5x7 import FONT_5X7, SEPARATOR_GLYPH
from .errors import CapacityExceeded, EmptyInput, ShapeMismatch, UnsupportedCharacter

WATERMARK_SIZE = 256
TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"
SEPARATOR = "\n"
SUBSTITUTE = "?"


@dataclass(frozen=True)
class MetadataRecord:
    prompt: str
    user_id: int
    timestamp: str

    def __post_init__(self):
        if isinstance(self.user_id, bool) or not isinstance(self.user_id, (int, np.integer)):
            raise ValueError(f"user_id must be an integer, got {self.user_id!r}")
        if not 0 <= int(self.user_id) <= 9:
            raise ValueError(f"user_id must be a digit 0-9, got {self.user_id}")
        _dt.datetime.strptime(self.timestamp, TIMESTAMP_FORMAT)

    @classmethod
    def now(cls, prompt: str, user_id: int, clock: _dt.datetime | None = None) -> "MetadataRecord":
        clock = clock or _dt.datetime.now()
        return cls(prompt, user_id, clock.strftime(TIMESTAMP_FORMAT))

    def to_dict(self) -> dict:
        return {"prompt": self.prompt, "user_id": int(self.user_id), "timestamp": self.timestamp}

    @classmethod
    def from_dict(cls, d: dict) -> "MetadataRecord":
        return cls(d["prompt"], int(d["user_id"]), d["timestamp"])


def _column_bitmap(columns) -> np.ndarray:
    return np.array([[(c >> r) & 1 for c in columns] for r in range(7)], dtype=np.uint8)


@dataclass(frozen=True)
class GlyphLayout:
    """Grid geometry plus the glyph masks it draws with.

    ``glyphs`` maps each supported character to a ``cell_h x cell_w`` mask.
    The separator is stored under ``"\\n"``.
    """

    cell_w: int = 16
    cell_h: int = 16
    cols: int = 16
    rows: int = 16
    scale: int = 2
    glyphs: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.cols * self.cell_w > WATERMARK_SIZE or self.rows * self.cell_h > WATERMARK_SIZE:
            raise ValueError("grid does not fit in the watermark image")
        gh, gw = 7 * self.scale, 5 * self.scale
        if gh > self.cell_h - 2 or gw > self.cell_w - 2:
            raise ValueError("scaled glyph does not fit the cell with a 1-pixel border")
        if self.glyphs is None:
            object.__setattr__(self, "glyphs", self._build_glyphs())

    def _build_glyphs(self) -> dict:
        top = (self.cell_h - 7 * self.scale) // 2
        left = (self.cell_w - 5 * self.scale) // 2
        out = {}
        table = dict(FONT_5X7)
        table[SEPARATOR] = SEPARATOR_GLYPH
        for ch, cols in table.items():
            mask = np.zeros((self.cell_h, self.cell_w), dtype=np.uint8)
            bm = np.kron(_column_bitmap(cols), np.ones((self.scale, self.scale), dtype=np.uint8))
            mask[top:top + bm.shape[0], left:left + bm.shape[1]] = bm
            out[ch] = mask
        return out

    @property
    def capacity(self) -> int:
        return self.rows * self.cols

    @property
    def charset(self) -> str:
        return "".join(self.glyphs)

    def min_glyph_distance(self) -> int:
        """Smallest pixel Hamming distance between two distinct glyph masks."""
        flat = np.stack([m.ravel() for m in self.glyphs.values()]).astype(np.int32)
        d = (flat[:, None, :] != flat[None, :, :]).sum(-1)
        d[np.diag_indices_from(d)] = d.max() + 1
        return int(d.min())

    def to_dict(self) -> dict:
        return {
            "cell_w": self.cell_w,
            "cell_h": self.cell_h,
            "cols": self.cols,
            "rows": self.rows,
            "scale": self.scale,
            "font": "5x7-ascii",
            "fields": ["prompt", "user_id", "timestamp"],
            "separator": "\\n",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GlyphLayout":
        return cls(d["cell_w"], d["cell_h"], d["cols"], d["rows"], d.get("scale", 2))


DEFAULT_LAYOUT = GlyphLayout()


def payload_text(meta: MetadataRecord, layout: GlyphLayout = DEFAULT_LAYOUT,
                 substitute: bool = True, truncate: bool = True) -> tuple[str, bool]:
    """Return the string that gets rendered and whether the prompt was cut."""
    prompt = meta.prompt.replace("\r", " ").replace("\n", " ").replace("\t", " ")
    supported = set(layout.glyphs)
    if substitute:
        prompt = "".join(c if c in supported else SUBSTITUTE for c in prompt)
    tail = f"{SEPARATOR}{int(meta.user_id)}{SEPARATOR}{meta.timestamp}"
    room = layout.capacity - len(tail)
    truncated = len(prompt) > room
    if truncated:
        if not truncate:
            raise CapacityExceeded(f"payload needs {len(prompt) + len(tail)} cells, grid has {layout.capacity}")
        prompt = prompt[:room]
    text = prompt + tail
    for c in text:
        if c not in supported:
            raise UnsupportedCharacter(f"character {c!r} is not in the glyph set")
    return text, truncated


def render_text(text: str, layout: GlyphLayout = DEFAULT_LAYOUT) -> np.ndarray:
    if len(text) > layout.capacity:
        raise CapacityExceeded(f"{len(text)} characters exceed capacity {layout.capacity}")
    img = np.zeros((WATERMARK_SIZE, WATERMARK_SIZE, 1), dtype=np.uint8)
    for i, c in enumerate(text):
        try:
            mask = layout.glyphs[c]
        except KeyError:
            raise UnsupportedCharacter(f"character {c!r} is not in the glyph set") from None
        r, col = divmod(i, layout.cols)
        y, x = r * layout.cell_h, col * layout.cell_w
        img[y:y + layout.cell_h, x:x + layout.cell_w, 0] = mask
    return img


def render_payload(meta: MetadataRecord, layout: GlyphLayout = DEFAULT_LAYOUT,
                   substitute: bool = True, truncate: bool = True) -> np.ndarray:
    """Render ``meta`` into a 256x256x1 uint8 image with values in {0, 1}."""
    text, _ = payload_text(meta, layout, substitute=substitute, truncate=truncate)
    return render_text(text, layout)


def binarize(img, threshold: float = 0.5) -> np.ndarray:
    img = np.asarray(img)
    if img.shape != (WATERMARK_SIZE, WATERMARK_SIZE, 1):
        raise ShapeMismatch(f"expected (256, 256, 1), got {img.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return (img >= threshold).astype(np.uint8)


@dataclass
class DecodedPayload:
    text: str
    cells: list
    per_cell_confidence: list
    fields: dict | None

    @property
    def mean_confidence(self) -> float:
        """Mean confidence over non-blank cells, 0 when nothing was decoded."""
        conf = [c for ch, c in zip(self.cells, self.per_cell_confidence) if ch != " "]
        return float(np.mean(conf)) if conf else 0.0


def _templates(layout: GlyphLayout):
    chars = list(layout.glyphs)
    t = np.stack([layout.glyphs[c].ravel() for c in chars]).astype(np.float64) * 2.0 - 1.0
    return chars, t / np.sqrt(t.shape[1])


def cell_patches(img, layout: GlyphLayout = DEFAULT_LAYOUT) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., 0]
    h, w = layout.rows * layout.cell_h, layout.cols * layout.cell_w
    grid = img[:h, :w].reshape(layout.rows, layout.cell_h, layout.cols, layout.cell_w)
    return grid.transpose(0, 2, 1, 3).reshape(layout.capacity, layout.cell_h * layout.cell_w)


def parse_fields(text: str) -> dict | None:
    """Split decoded text into prompt, user ID and timestamp.

    The last two separators delimit the tail fields, so damage inside the
    prompt cannot shift them. A tail field that fails its format check is
    reported as None; the whole result is None when fewer than two
    separators survive.
    """
    parts = text.split(SEPARATOR)
    if len(parts) < 3:
        return None
    prompt, uid, ts = SEPARATOR.join(parts[:-2]), parts[-2], parts[-1]
    try:
        _dt.datetime.strptime(ts, TIMESTAMP_FORMAT)
    except ValueError:
        ts = None
    return {"prompt": prompt, "user_id": int(uid) if len(uid) == 1 and uid.isdigit() else None, "timestamp": ts}


def decode_payload(img, layout: GlyphLayout = DEFAULT_LAYOUT) -> DecodedPayload:
    """Template-match every cell against every glyph (and blank).

    Patches and templates are mapped to {-1, +1} before the normalized
    correlation, so blank cells have a well-defined score and on binary
    input the winner is the glyph at minimum Hamming distance.
    """
    img = np.asarray(img)
    if img.shape[:2] != (WATERMARK_SIZE, WATERMARK_SIZE):
        raise ShapeMismatch(f"expected a 256x256 watermark image, got {img.shape}")
    chars, tmpl = _templates(layout)
    p = cell_patches(img, layout) * 2.0 - 1.0
    norm = np.linalg.norm(p, axis=1, keepdims=True)
    p = np.divide(p, norm, out=np.zeros_like(p), where=norm > 0)
    scores = p @ tmpl.T
    best = scores.argmax(axis=1)
    cells = [chars[i] for i in best]
    conf = np.clip(scores[np.arange(len(best)), best], 0.0, 1.0).tolist()
    text = "".join(cells).rstrip(" ")
    return DecodedPayload(text=text, cells=cells, per_cell_confidence=conf, fields=parse_fields(text))


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit insert, delete and substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def character_edit_ratio(records) -> float:
    """Mean of per-sample ``edits / length``, in percent.

    ``records`` is an iterable of ``(ca_i, n_i)`` pairs with ``n_i > 0``.
    """
    records = list(records)
    if not records:
        raise EmptyInput("character_edit_ratio needs at least one record")
    total = 0.0
    for ca, n in records:
        if n <= 0:
            raise ValueError("every n_i must be positive")
        total += ca / n
    return total / len(records) * 100.0


def save_png(img, path) -> None:
    from PIL import Image

    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[..., 0]
    Image.fromarray((arr > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_png(path) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("L"))
    return (arr >= 128).astype(np.uint8)[..., None]
