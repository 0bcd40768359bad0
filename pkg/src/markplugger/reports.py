"""Deterministic report files: JSON, CSV and markdown tables.

Output is byte-stable for equal input: keys are sorted in JSON, CSV columns
follow a fixed order, floats are written with a fixed number of decimals, and
every file ends with a newline.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, is_dataclass
from pathlib import Path

FORMATS = ("json", "csv", "markdown")
SUFFIX = {"json": ".json", "csv": ".csv", "markdown": ".md"}

# Column groups of the headline results table.
EVAL_GROUPS = (
    ("Watermark invisibility", (("psnr_db", "PSNR (dB)"), ("ssim_pct", "SSIM (%)"), ("lpips", "LPIPS"))),
    ("Watermark recoverability", (("nc_pct", "NC (%)"), ("ca", "CA"), ("cer_pct", "CER (%)"))),
    ("Image quality", (("delta_fid", "dFID"), ("p_delta_fid_pct", "p_dFID (%)"))),
)
ATTACK_COLUMNS = ("kind", "intensity", "nc_pct", "cer_pct")


def _plain(obj):
    if is_dataclass(obj):
        obj = obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "item") and callable(obj.item):  # numpy / torch scalars
        return obj.item()
    return obj


def _fmt(v, digits: int) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v) or math.isinf(v):
            return str(v)
        return f"{v:.{digits}f}"
    return str(v)


def to_json(data) -> str:
    return json.dumps(_plain(data), indent=2, sort_keys=True, allow_nan=True) + "\n"


def _rows(data) -> list:
    data = _plain(data)
    if isinstance(data, dict):
        return [data]
    if not all(isinstance(r, dict) for r in data):
        raise TypeError("tabular reports need a mapping or a list of mappings")
    return data


def _columns(rows, columns=None) -> list:
    if columns:
        return list(columns)
    cols = []
    for r in rows:
        for k in r:
            if k not in cols and not isinstance(r[k], (list, dict)):
                cols.append(k)
    return cols


def to_csv(data, columns=None, digits: int = 4) -> str:
    rows = _rows(data)
    cols = _columns(rows, columns)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for r in rows:
        writer.writerow([_fmt(r.get(c), digits) for c in cols])
    return buf.getvalue()


def _is_eval(row: dict) -> bool:
    return all(k in row for k in ("psnr_db", "ssim_pct", "nc_pct", "cer_pct"))


def to_markdown(data, columns=None, digits: int = 2, label: str = "model") -> str:
    """Markdown table. Evaluation reports get the grouped headline layout."""
    rows = _rows(data)
    if not columns and rows and all(_is_eval(r) for r in rows):
        return _eval_markdown(rows, digits, label)
    cols = _columns(rows, columns)
    out = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        out.append("| " + " | ".join(_fmt(r.get(c), digits) for c in cols) + " |")
    return "\n".join(out) + "\n"


def _eval_markdown(rows, digits, label) -> str:
    groups = [(g, [c for c in cols if any(c[0] in r and r[c[0]] is not None for r in rows)])
              for g, cols in EVAL_GROUPS]
    groups = [(g, cols) for g, cols in groups if cols]
    head1 = ["", *[g + (" |" * (len(cols) - 1)) for g, cols in groups]]
    head2 = [label, *[name for _, cols in groups for _, name in cols]]
    keys = [k for _, cols in groups for k, _ in cols]
    out = ["| " + " | ".join(head1) + " |", "|" + "---|" * len(head2), "| " + " | ".join(head2) + " |"]
    for i, r in enumerate(rows):
        name = str(r.get(label, r.get("name", i)))
        out.append("| " + " | ".join([name, *(_fmt(r.get(k), digits) for k in keys)]) + " |")
    return "\n".join(out) + "\n"


def render(data, fmt: str, columns=None) -> str:
    if fmt == "json":
        return to_json(data)
    if fmt == "csv":
        return to_csv(data, columns)
    if fmt == "markdown":
        return to_markdown(data, columns)
    raise ValueError(f"unknown report format {fmt!r}; expected one of {FORMATS}")


def emit_report(data, fmt: str, path, columns=None) -> Path:
    """Write ``data`` to ``path`` (the format's suffix is added when missing)."""
    path = Path(path)
    if path.suffix != SUFFIX.get(fmt, path.suffix):
        path = path.with_name(path.name + SUFFIX[fmt])
    text = render(data, fmt, columns)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(text)
    return path
