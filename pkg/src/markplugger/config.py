"""Run configuration: schema, layered loading and per-key provenance.

Values resolve with precedence flags > environment > files > defaults. Every
resolved key remembers where it came from. Environment variables are named
``MARKPLUGGER_<SECTION>_<KEY>`` (upper case), e.g. ``MARKPLUGGER_TRAIN_LR``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import SchemaError
from .losses import LossWeights

ENV_PREFIX = "MARKPLUGGER_"
SOURCES = ("default", "file", "env", "flag")


@dataclass(frozen=True)
class Key:
    kind: str  # int | float | str | bool | floats | strs
    default: object = None
    check: object = None  # callable(value) -> error message or None
    nullable: bool = False
    doc: str = ""


def _ge(lo):
    return lambda v: None if v >= lo else f"must be >= {lo}"


def _within(lo, hi):
    return lambda v: None if lo <= v <= hi else f"must lie in [{lo}, {hi}]"


def _open01(v):
    return None if 0 < v < 1 else "must lie in (0, 1)"


def _one_of(*choices):
    return lambda v: None if v in choices else f"must be one of {list(choices)}"


def _gammas(v):
    if len(v) != 4:
        return "needs exactly four weights (gamma0..gamma3)"
    return None if all(g >= 0 for g in v) else "weights must be non-negative"


def _ascending(v):
    return None if list(v) == sorted(v) and all(a >= 0 for a in v) else "must be non-negative and ascending"


ALPHA = Key("float", 0.05, _ge(0.0), doc="watermark strength")
KAPPA = Key("int", 3, _within(0, 3), doc="carrier latent channel")
BACKEND = Key("str", "stub-v1", doc="stub-v1 | stub-v2 | stub-photo | diffusers:<model id>")
CKPT = Key("str", None, nullable=True, doc="watermark checkpoint")

SCHEMA = {
    "train": {
        "dataset": Key("str", "desk:1000", doc="folder of images or desk:N[:seed]"),
        "captions": Key("str", None, nullable=True, doc="captions.json {stem: caption}"),
        "epochs": Key("int", 1, _ge(1)),
        "batch_size": Key("int", 16, _ge(1)),
        "lr": Key("float", 1e-4, lambda v: None if v > 0 else "must be positive"),
        "optimizer": Key("str", "adam", _one_of("adam", "adamw", "sgd")),
        "gamma": Key("floats", [2.0, 0.2, 1.0, 1.0], _gammas, doc="loss weights gamma0..gamma3"),
        "alpha": ALPHA,
        "kappa": KAPPA,
        "attacks": Key("str", "default", _one_of("default", "none"), doc="training attack schedule"),
        "backend": BACKEND,
        "seed": Key("int", 0),
        "checkpoint_every": Key("int", 100, _ge(1)),
        "eval_fraction": Key("float", 0.05, _open01),
        "max_steps": Key("int", None, _ge(1), nullable=True),
        "window": Key("int", None, _ge(32), nullable=True, doc="extractor training window in image pixels"),
        "windows_per_image": Key("int", 1, _ge(1)),
        "steps_per_image": Key("int", 1, _ge(1), doc="updates per image visit, each with a fresh payload"),
        "out": Key("str", "runs/train"),
    },
    "embed": {
        "prompt": Key("str", None, nullable=True),
        "user_id": Key("int", 0, _within(0, 9)),
        "alpha": ALPHA,
        "kappa": KAPPA,
        "backend": BACKEND,
        "ckpt": CKPT,
        "seed": Key("int", 0),
        "steps": Key("int", 30, _ge(1), doc="denoising steps"),
        "timestamp": Key("str", None, nullable=True, doc="defaults to the current time"),
        "adapt_geometry": Key("bool", False),
        "out": Key("str", "out"),
    },
    "extract": {
        "image": Key("str", None, nullable=True),
        "ckpt": CKPT,
        "expect_manifest": Key("str", None, nullable=True),
        "threshold": Key("float", 0.6, _open01, doc="presence decision threshold"),
    },
    "evaluate": {
        "dataset": Key("str", "desk:1000"),
        "captions": Key("str", None, nullable=True),
        "indices": Key("str", "heldout", doc="heldout | all | first:N"),
        "ckpt": CKPT,
        "backend": BACKEND,
        "alpha": Key("float", None, _ge(0.0), nullable=True, doc="defaults to the checkpoint's"),
        "seed": Key("int", 0),
        "eval_fraction": Key("float", 0.05, _open01),
        "format": Key("str", "json", _one_of("json", "csv", "markdown")),
        "out": Key("str", "runs/eval"),
    },
    "sweep": {
        "kind": Key("str", "alpha", _one_of("alpha", "attack", "channel")),
        "ckpt": CKPT,
        "ckpts": Key("strs", [], doc="channel sweep: one checkpoint per kappa"),
        "alphas": Key("floats", [0.0, 0.01, 0.02, 0.05, 0.1, 0.15, 0.2], _ascending),
        "attack_kinds": Key("strs", ["gaussian_blur", "gaussian_noise", "brightness", "crop", "rotation",
                                     "salt_pepper"]),
        "levels": Key("int", 5, _ge(2)),
        "dataset": Key("str", "desk:1000"),
        "captions": Key("str", None, nullable=True),
        "indices": Key("str", "heldout"),
        "backend": BACKEND,
        "seed": Key("int", 0),
        "eval_fraction": Key("float", 0.05, _open01),
        "format": Key("str", "csv", _one_of("json", "csv", "markdown")),
        "out": Key("str", "runs/sweep"),
    },
}


def _coerce(path: str, key: Key, value, from_text: bool):
    if value is None:
        if key.nullable:
            return None
        raise SchemaError(path, "may not be null")
    try:
        if key.kind == "bool":
            if from_text:
                low = str(value).strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(value)
                return low in ("1", "true", "yes")
            if not isinstance(value, bool):
                raise TypeError
            return value
        if key.kind in ("int", "float") and isinstance(value, str) and not from_text:
            raise TypeError
        if key.kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if key.kind == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if key.kind == "str":
            if not from_text and not isinstance(value, str):
                raise TypeError
            return str(value)
        if key.kind in ("floats", "strs"):
            if from_text and isinstance(value, str):
                text = value.strip()
                value = json.loads(text) if text.startswith("[") else [t for t in text.split(",") if t.strip()]
            if not isinstance(value, (list, tuple)):
                raise TypeError
            conv = float if key.kind == "floats" else str
            return [conv(v.strip() if isinstance(v, str) else v) for v in value]
    except (TypeError, ValueError, json.JSONDecodeError):
        raise SchemaError(path, f"expected {key.kind}, got {value!r}") from None
    raise SchemaError(path, f"unknown type {key.kind}")


def _validate(path: str, key: Key, value):
    if value is not None and key.check is not None:
        msg = key.check(value)
        if msg:
            raise SchemaError(path, msg)


@dataclass
class RunConfig:
    """Resolved values per section plus the source each came from.

    Equality compares values only; provenance is bookkeeping.
    """

    values: dict
    sources: dict = field(default_factory=dict, compare=False)

    def section(self, name: str) -> dict:
        return dict(self.values[name])

    def get(self, dotted: str):
        sec, key = dotted.split(".", 1)
        return self.values[sec][key]

    def source(self, dotted: str) -> str:
        sec, key = dotted.split(".", 1)
        return self.sources[sec][key]

    def to_dict(self) -> dict:
        return {sec: dict(vals) for sec, vals in self.values.items()}

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def loss_weights(self) -> LossWeights:
        return LossWeights(*self.values["train"]["gamma"])


def _defaults():
    values = {s: {k: (list(v.default) if isinstance(v.default, list) else v.default) for k, v in keys.items()}
              for s, keys in SCHEMA.items()}
    sources = {s: {k: "default" for k in keys} for s, keys in SCHEMA.items()}
    return values, sources


def _apply(values, sources, data: dict, origin: str, from_text: bool, where: str = ""):
    if not isinstance(data, dict):
        raise SchemaError(where or "<root>", "expected a mapping of sections")
    for sec, body in data.items():
        if sec not in SCHEMA:
            raise SchemaError(f"{where}{sec}", "unknown section")
        if not isinstance(body, dict):
            raise SchemaError(f"{where}{sec}", "expected a mapping")
        for k, v in body.items():
            path = f"{sec}.{k}"
            if k not in SCHEMA[sec]:
                raise SchemaError(path, "unknown key")
            text = isinstance(v, str) if from_text == "auto" else from_text
            values[sec][k] = _coerce(path, SCHEMA[sec][k], v, text)
            sources[sec][k] = origin


def _nest(flags) -> dict:
    """Accept ``{"train.lr": 1e-3}`` or ``{"train": {"lr": 1e-3}}``; ``None`` values are skipped."""
    out: dict = {}
    for k, v in (flags or {}).items():
        if isinstance(v, dict):
            for kk, vv in v.items():
                if vv is not None:
                    out.setdefault(k, {})[kk] = vv
        elif v is not None:
            if "." not in k:
                raise SchemaError(k, "flag keys must look like section.key")
            sec, key = k.split(".", 1)
            out.setdefault(sec, {})[key] = v
    return out


def _from_env(env) -> dict:
    out: dict = {}
    for name, raw in (env or {}).items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        for sec in SCHEMA:
            if rest.startswith(sec + "_"):
                key = rest[len(sec) + 1:]
                if key not in SCHEMA[sec]:
                    raise SchemaError(f"{sec}.{key}", f"unknown key (from ${name})")
                out.setdefault(sec, {})[key] = raw
                break
    return out


def load_config(paths=(), flags=None, env=None) -> RunConfig:
    """Layer defaults, JSON files (in order), environment and flags; validate everything.

    Flag values may be typed or raw command-line strings. ``env`` defaults to ``os.environ``; pass ``{}`` to ignore the environment.
    Emits a warning (and proceeds) when the loss weights break the balance
    gamma0 == gamma2 + gamma3.
    """
    values, sources = _defaults()
    for p in paths or ():
        p = Path(p)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise SchemaError(str(p), f"invalid JSON: {e}") from None
        _apply(values, sources, data, "file", from_text=False)
    _apply(values, sources, _from_env(os.environ if env is None else env), "env", from_text=True)
    _apply(values, sources, _nest(flags), "flag", from_text="auto")
    for sec, keys in SCHEMA.items():
        for k, key in keys.items():
            _validate(f"{sec}.{k}", key, values[sec][k])
    cfg = RunConfig(values, sources)
    if sources["train"]["gamma"] != "default":
        cfg.loss_weights().check_balance()
    return cfg


def schema_markdown() -> str:
    """Human-readable table of every key, its type and default."""
    lines = ["| key | type | default | notes |", "|---|---|---|---|"]
    for sec, keys in SCHEMA.items():
        for k, key in keys.items():
            cells = [f"{sec}.{k}", key.kind, json.dumps(key.default), key.doc]
            lines.append("| " + " | ".join(c.replace("|", "\\|") for c in cells) + " |")
    return "\n".join(lines) + "\n"
