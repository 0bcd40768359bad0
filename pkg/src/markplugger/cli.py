"""Command-line entry point: ``markplugger <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 backend error, 4 data error.
Every option of a command maps to a config key of its section, so the same
settings can come from ``--config file.json``, ``MARKPLUGGER_<SECTION>_<KEY>``
environment variables, or flags (highest precedence).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import SCHEMA, load_config
from .errors import BackendUnavailable, DataError, GeometryMismatch, SchemaError

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_DATA = 0, 2, 3, 4

COMMANDS = {
    "train": ("train", "train the watermark encoder and extractor"),
    "embed": ("embed", "generate a watermarked image for a prompt"),
    "extract": ("extract", "recover and decode the payload of an image"),
    "evaluate": ("evaluate", "score a checkpoint on a corpus"),
    "sweep": ("sweep", "alpha, attack or channel sweep (choose with --kind)"),
    "alpha-sweep": ("sweep", "SSIM / CER as a function of the watermark strength"),
    "attack-sweep": ("sweep", "NC / CER under each attack family and intensity"),
    "channel-ablation": ("sweep", "one checkpoint per carrier channel, scored side by side"),
    "params": (None, "print the trainable parameter count of the default nets"),
}
FIXED_KIND = {"alpha-sweep": "alpha", "attack-sweep": "attack", "channel-ablation": "channel"}


class ConfigProblem(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="markplugger", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (section, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        if section is None:
            continue
        sp.add_argument("--config", action="append", default=[], metavar="FILE",
                        help="JSON config file (repeatable; later files win)")
        for key, spec in SCHEMA[section].items():
            if name in FIXED_KIND and key == "kind":
                continue
            flag = "--" + key.replace("_", "-")
            hint = f"{spec.kind}, default {json.dumps(spec.default)}"
            sp.add_argument(flag, dest=key, default=None, help=f"{spec.doc} ({hint})" if spec.doc else hint)
    return p


def resolve(args, env=None):
    section = COMMANDS[args.command][0]
    flags = {f"{section}.{k}": getattr(args, k, None) for k in SCHEMA[section]}
    if args.command in FIXED_KIND:
        flags[f"{section}.kind"] = FIXED_KIND[args.command]
    try:
        return load_config(args.config, flags, env)
    except FileNotFoundError as e:
        raise ConfigProblem(str(e)) from e


def _need(cfg, dotted):
    v = cfg.get(dotted)
    if v in (None, "", []):
        raise SchemaError(dotted, "is required for this command")
    return v


def _load_nets(path):
    from .nets import load_checkpoint

    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        nets, fusion, _ = load_checkpoint(path)
    except Exception as e:  # torch.load raises unpickling, zip and key errors for foreign files
        raise DataError(f"{path}: unreadable checkpoint ({e})") from e
    return nets, fusion


def _fusion(cfg, section, ckpt_fusion):
    """Explicitly set alpha/kappa win; defaults fall back to the checkpoint's values."""
    from .nets import FusionConfig

    alpha, kappa = ckpt_fusion.alpha, ckpt_fusion.kappa
    if cfg.source(f"{section}.alpha") != "default":
        alpha = cfg.get(f"{section}.alpha")
    if cfg.source(f"{section}.kappa") != "default":
        kappa = cfg.get(f"{section}.kappa")
    return FusionConfig(alpha, kappa)


def _samples(cfg, section, backend):
    from .data import open_dataset, split_indices
    from .pipeline import latents_from_corpus

    ds = open_dataset(cfg.get(f"{section}.dataset"), cfg.get(f"{section}.captions"))
    sel = cfg.get(f"{section}.indices")
    if sel == "heldout":
        idx = split_indices(len(ds), cfg.get(f"{section}.eval_fraction"), cfg.get(f"{section}.seed"))[1]
    elif sel == "all":
        idx = list(range(len(ds)))
    elif sel.startswith("first:"):
        idx = list(range(min(len(ds), int(sel.split(":", 1)[1]))))
    else:
        raise SchemaError(f"{section}.indices", "expected heldout, all or first:N")
    return latents_from_corpus(backend, ds, idx, seed=cfg.get(f"{section}.seed"))


def cmd_train(cfg, out):
    from .attacks import AttackSchedule
    from .losses import LossWeights
    from .nets import FusionConfig
    from .train import TrainConfig, run_training

    t = cfg.section("train")
    tc = TrainConfig(dataset=t["dataset"], captions=t["captions"], epochs=t["epochs"], batch_size=t["batch_size"],
                     lr=t["lr"], optimizer=t["optimizer"], weights=LossWeights(*t["gamma"]),
                     fusion=FusionConfig(t["alpha"], t["kappa"]),
                     attacks=AttackSchedule() if t["attacks"] == "default" else AttackSchedule.only("identity"),
                     backend=t["backend"], seed=t["seed"], checkpoint_every=t["checkpoint_every"],
                     eval_fraction=t["eval_fraction"], out_dir=t["out"], max_steps=t["max_steps"],
                     window=t["window"], windows_per_image=t["windows_per_image"],
                     steps_per_image=t["steps_per_image"])
    tc.validate()
    Path(t["out"]).mkdir(parents=True, exist_ok=True)
    _write_resolved(cfg, Path(t["out"]) / "run_config.json")

    def progress(rec):
        if rec.step % 50 == 0:
            print(json.dumps({"step": rec.step, "total": round(rec.total, 5), "attack": rec.attack["kind"]}),
                  file=out, flush=True)

    result = run_training(tc, progress=progress)
    print(json.dumps({"checkpoint": str(result.checkpoint), "final_eval": result.manifest["final_eval"]},
                     indent=2, sort_keys=True), file=out)


def _write_resolved(cfg, path):
    path.write_text(json.dumps({"values": cfg.to_dict(), "sources": cfg.sources}, indent=2, sort_keys=True) + "\n")


def cmd_embed(cfg, out):
    from .backend import make_backend
    from .nets import checkpoint_hash
    from .pipeline import generate_watermarked

    e = cfg.section("embed")
    prompt = _need(cfg, "embed.prompt")
    nets, ckpt_fusion = _load_nets(_need(cfg, "embed.ckpt"))
    fusion = _fusion(cfg, "embed", ckpt_fusion)
    backend = make_backend(e["backend"])
    _, manifest = generate_watermarked(prompt, e["user_id"], backend, nets, fusion, seed=e["seed"],
                                       steps=e["steps"], timestamp=e["timestamp"], out_dir=e["out"],
                                       ckpt_hash=checkpoint_hash(e["ckpt"]), adapt_geometry=e["adapt_geometry"])
    print(json.dumps(manifest.to_dict(), indent=2, sort_keys=True), file=out)


def cmd_extract(cfg, out):
    from .payload import GlyphLayout
    from .pipeline import GenerationManifest, load_image, verify_image

    x = cfg.section("extract")
    image_path = Path(_need(cfg, "extract.image"))
    if not image_path.is_file():
        raise DataError(f"image not found: {image_path}")
    nets, _ = _load_nets(_need(cfg, "extract.ckpt"))
    expected, layout = None, None
    if x["expect_manifest"]:
        mp = Path(x["expect_manifest"])
        if not mp.is_file():
            raise DataError(f"manifest not found: {mp}")
        m = GenerationManifest.load(mp)
        expected, layout = m.meta(), GlyphLayout.from_dict(m.layout)
    try:
        img = load_image(image_path)
    except Exception as e:  # PIL raises several unrelated types for unreadable files
        raise DataError(f"{image_path}: unreadable image ({e})") from e
    kwargs = {"layout": layout} if layout else {}
    report = verify_image(img, nets, expected_meta=expected, threshold=x["threshold"], **kwargs)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True), file=out)


def cmd_evaluate(cfg, out):
    from .backend import make_backend
    from .nets import FusionConfig
    from .pipeline import evaluate_latents
    from .reports import emit_report

    e = cfg.section("evaluate")
    nets, ckpt_fusion = _load_nets(_need(cfg, "evaluate.ckpt"))
    fusion = FusionConfig(ckpt_fusion.alpha if e["alpha"] is None else e["alpha"], ckpt_fusion.kappa)
    backend = make_backend(e["backend"])
    report, _ = evaluate_latents(_samples(cfg, "evaluate", backend), backend, nets, fusion)
    row = dict(report.to_dict(), model=f"{backend.identifier} kappa={fusion.kappa} alpha={fusion.alpha}")
    row.pop("failures")
    path = emit_report(row, e["format"], Path(e["out"]) / "evaluation")
    print(json.dumps({"report": str(path), **report.to_dict()}, indent=2, sort_keys=True), file=out)


def cmd_sweep(cfg, out):
    from .attacks import attack_sweep_grid
    from .backend import make_backend
    from .pipeline import alpha_sweep, attack_sweep, channel_ablation
    from .reports import ATTACK_COLUMNS, emit_report

    s = cfg.section("sweep")
    backend = make_backend(s["backend"])
    columns = None
    if s["kind"] == "channel":
        ckpts = s["ckpts"]
        if not ckpts:
            raise SchemaError("sweep.ckpts", "the channel sweep needs one checkpoint per kappa")
        per = {}
        for path in ckpts:
            nets, fusion = _load_nets(path)
            if fusion.kappa in per:
                raise SchemaError("sweep.ckpts", f"two checkpoints for kappa={fusion.kappa}")
            per[fusion.kappa] = (nets, fusion)
        rows = channel_ablation(backend, per, _samples(cfg, "sweep", backend))
    else:
        nets, fusion = _load_nets(_need(cfg, "sweep.ckpt"))
        samples = _samples(cfg, "sweep", backend)
        if s["kind"] == "alpha":
            rows = alpha_sweep(backend, nets, samples, s["alphas"], kappa=fusion.kappa)
        else:
            rows = attack_sweep(backend, nets, samples, attack_sweep_grid(s["attack_kinds"], s["levels"]), fusion)
            if s["format"] == "csv":
                columns = ATTACK_COLUMNS
    path = emit_report(rows, s["format"], Path(s["out"]) / f"{s['kind']}_sweep", columns)
    print(json.dumps({"report": str(path), "rows": rows}, indent=2, sort_keys=True), file=out)


def cmd_params(out):
    from .nets import WatermarkNets, count_parameters

    nets = WatermarkNets()
    parts = {name: count_parameters(getattr(nets, name)) for name in ("enc", "ext", "dec")}
    print(json.dumps({"total": count_parameters(nets), **parts}, indent=2), file=out)


HANDLERS = {"train": cmd_train, "embed": cmd_embed, "extract": cmd_extract, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep, "alpha-sweep": cmd_sweep, "attack-sweep": cmd_sweep, "channel-ablation": cmd_sweep}


def main(argv=None, env=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse reports usage errors with status 2
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        if args.command == "params":
            cmd_params(out)
            return EXIT_OK
        cfg = resolve(args, env)
        HANDLERS[args.command](cfg, out)
        return EXIT_OK
    except (SchemaError, ConfigProblem) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (BackendUnavailable, GeometryMismatch) as e:
        print(f"backend error: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:  # invalid combinations caught by the typed configs
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
