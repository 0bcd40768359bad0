import io
import json

import pytest
import torch

from markplugger.cli import COMMANDS, EXIT_BACKEND, EXIT_CONFIG, EXIT_DATA, EXIT_OK, build_parser, main
from markplugger.nets import FusionConfig, WatermarkNets, count_parameters, save_checkpoint

TS = "2025-06-07 08:09:10"


def cli(*argv, env=None):
    out = io.StringIO()
    code = main(list(argv), env=env or {}, out=out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    torch.manual_seed(0)
    nets = WatermarkNets()
    with torch.no_grad():
        for p in nets.enc.parameters():
            p.normal_(0, 0.05)
    path = tmp_path_factory.mktemp("ck") / "k3.pt"
    save_checkpoint(path, nets, FusionConfig(0.05, 3))
    return path


def test_params():
    code, text = cli("params")
    assert code == EXIT_OK
    d = json.loads(text)
    assert d["total"] == count_parameters(WatermarkNets()) == d["enc"] + d["ext"] + d["dec"]


def test_every_command_has_help():
    parser = build_parser()
    for name in COMMANDS:
        with pytest.raises(SystemExit) as e:
            parser.parse_args([name, "--help"])
        assert e.value.code == 0


def test_usage_errors_exit_2():
    assert cli()[0] == EXIT_CONFIG
    assert cli("paint")[0] == EXIT_CONFIG
    assert cli("embed", "--bogus", "1")[0] == EXIT_CONFIG


def test_config_errors_exit_2(tmp_path, ckpt):
    assert cli("embed", "--ckpt", str(ckpt))[0] == EXIT_CONFIG  # missing prompt
    assert cli("embed", "--prompt", "p", "--ckpt", str(ckpt), "--user-id", "12")[0] == EXIT_CONFIG
    assert cli("train", "--lr", "-1")[0] == EXIT_CONFIG
    assert cli("embed", "--config", str(tmp_path / "missing.json"))[0] == EXIT_CONFIG
    assert cli("embed", "--prompt", "p", env={"MARKPLUGGER_EMBED_NOPE": "1"})[0] == EXIT_CONFIG
    assert cli("channel-ablation", "--out", str(tmp_path))[0] == EXIT_CONFIG


def test_backend_errors_exit_3(tmp_path, ckpt):
    code, _ = cli("embed", "--prompt", "p", "--ckpt", str(ckpt), "--backend", "nowhere", "--out", str(tmp_path))
    assert code == EXIT_BACKEND


def test_data_errors_exit_4(tmp_path, ckpt):
    assert cli("embed", "--prompt", "p", "--ckpt", str(tmp_path / "none.pt"))[0] == EXIT_DATA
    junk = tmp_path / "junk.pt"
    junk.write_bytes(b"not a checkpoint")
    assert cli("embed", "--prompt", "p", "--ckpt", str(junk))[0] == EXIT_DATA
    assert cli("extract", "--image", str(tmp_path / "none.png"), "--ckpt", str(ckpt))[0] == EXIT_DATA
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"\x89PNG garbage")
    assert cli("extract", "--image", str(bad), "--ckpt", str(ckpt))[0] == EXIT_DATA
    assert cli("train", "--dataset", str(tmp_path / "no_such_dir"), "--out", str(tmp_path / "t"))[0] == EXIT_DATA


def test_embed_then_extract(tmp_path, ckpt):
    code, text = cli("embed", "--prompt", "a cli check", "--user-id", "4", "--ckpt", str(ckpt), "--steps", "3",
                     "--seed", "2", "--timestamp", TS, "--out", str(tmp_path))
    assert code == EXIT_OK
    m = json.loads(text)
    assert m["output_image"] == "wm_2_4.png" and m["fusion"] == {"alpha": 0.05, "kappa": 3}
    assert m["timestamp"] == TS and len(m["checkpoint_hash"]) == 16
    code, text = cli("extract", "--image", str(tmp_path / "wm_2_4.png"), "--ckpt", str(ckpt),
                     "--expect-manifest", str(tmp_path / "wm_2_4.json"))
    assert code == EXIT_OK
    rep = json.loads(text)
    assert {"detected", "mean_confidence", "threshold", "text", "nc", "ca", "cer_pct", "user_id_ok"} <= set(rep)
    assert rep["threshold"] == 0.6


def test_flags_override_env_and_checkpoint(tmp_path, ckpt):
    env = {"MARKPLUGGER_EMBED_ALPHA": "0.1", "MARKPLUGGER_EMBED_TIMESTAMP": TS}
    code, text = cli("embed", "--prompt", "p", "--ckpt", str(ckpt), "--steps", "2", "--kappa", "1",
                     "--out", str(tmp_path), env=env)
    assert code == EXIT_OK
    assert json.loads(text)["fusion"] == {"alpha": 0.1, "kappa": 1}


def test_config_file(tmp_path, ckpt):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"embed": {"prompt": "from file", "ckpt": str(ckpt), "steps": 2, "timestamp": TS,
                                         "out": str(tmp_path)}}))
    code, text = cli("embed", "--config", str(cfg), "--user-id", "9")
    assert code == EXIT_OK
    m = json.loads(text)
    assert m["prompt"] == "from file" and m["user_id"] == 9


def test_evaluate_writes_report(tmp_path, ckpt):
    code, text = cli("evaluate", "--ckpt", str(ckpt), "--dataset", "desk:4", "--indices", "first:2",
                     "--format", "markdown", "--out", str(tmp_path))
    assert code == EXIT_OK
    d = json.loads(text)
    assert d["sample_count"] == 2
    assert (tmp_path / "evaluation.md").read_text().startswith("|")


def test_fixed_kind_sweeps(tmp_path, ckpt):
    code, text = cli("alpha-sweep", "--ckpt", str(ckpt), "--dataset", "desk:3", "--indices", "first:1",
                     "--alphas", "0,0.05", "--format", "json", "--out", str(tmp_path))
    assert code == EXIT_OK
    rows = json.loads(text)["rows"]
    assert [r["alpha"] for r in rows] == [0.0, 0.05]
    assert (tmp_path / "alpha_sweep.json").is_file()
    with pytest.raises(SystemExit):
        build_parser().parse_args(["alpha-sweep", "--kind", "attack"])
    code, text = cli("attack-sweep", "--ckpt", str(ckpt), "--dataset", "desk:3", "--indices", "first:1",
                     "--attack-kinds", "rotation", "--levels", "2", "--out", str(tmp_path))
    assert code == EXIT_OK
    header = (tmp_path / "attack_sweep.csv").read_text().splitlines()[0]
    assert header.split(",")[:2] == ["kind", "intensity"]


def test_channel_sweep_rejects_duplicate_kappa(tmp_path, ckpt):
    code, _ = cli("channel-ablation", "--ckpts", f"{ckpt},{ckpt}", "--dataset", "desk:3", "--out", str(tmp_path))
    assert code == EXIT_CONFIG
