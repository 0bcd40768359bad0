import json
import warnings

import pytest
from hypothesis import given, settings, strategies as st

from markplugger.config import SCHEMA, RunConfig, load_config, schema_markdown
from markplugger.errors import SchemaError


def test_defaults():
    cfg = load_config(env={})
    assert cfg.get("train.alpha") == 0.05 and cfg.get("embed.alpha") == 0.05
    assert cfg.get("train.kappa") == 3
    assert cfg.get("train.gamma") == [2.0, 0.2, 1.0, 1.0]
    assert cfg.get("embed.steps") == 30
    assert cfg.get("train.epochs") == 1 and cfg.get("train.batch_size") == 16 and cfg.get("train.lr") == 1e-4
    assert all(src == "default" for sec in cfg.sources.values() for src in sec.values())


def test_precedence_and_provenance(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"train": {"lr": 0.01, "seed": 5, "epochs": 2}}))
    env = {"MARKPLUGGER_TRAIN_SEED": "6", "MARKPLUGGER_TRAIN_EPOCHS": "3", "HOME": "/x"}
    cfg = load_config([f], {"train.epochs": "4"}, env)
    assert cfg.get("train.lr") == 0.01 and cfg.source("train.lr") == "file"
    assert cfg.get("train.seed") == 6 and cfg.source("train.seed") == "env"
    assert cfg.get("train.epochs") == 4 and cfg.source("train.epochs") == "flag"
    assert cfg.source("train.batch_size") == "default"


def test_later_files_win(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(json.dumps({"embed": {"seed": 1, "user_id": 2}}))
    b.write_text(json.dumps({"embed": {"seed": 3}}))
    cfg = load_config([a, b], env={})
    assert (cfg.get("embed.seed"), cfg.get("embed.user_id")) == (3, 2)


def test_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config([tmp_path / "nope.json"], env={})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(SchemaError):
        load_config([bad], env={})
    with pytest.raises(SchemaError, match="train.colour"):
        load_config(flags={"train.colour": 1}, env={})
    with pytest.raises(SchemaError, match="unknown section"):
        load_config(flags={"paint": {"x": 1}}, env={})
    with pytest.raises(SchemaError, match="train.kappa"):
        load_config(flags={"train.kappa": 4}, env={})
    with pytest.raises(SchemaError, match="embed.user_id"):
        load_config(flags={"embed.user_id": "ten"}, env={})
    with pytest.raises(SchemaError):
        load_config(env={"MARKPLUGGER_TRAIN_NOPE": "1"})
    with pytest.raises(SchemaError, match="gamma"):
        load_config(flags={"train.gamma": "1,2,3"}, env={})
    with pytest.raises(SchemaError):
        load_config(flags={"sweep.alphas": "0.2,0.1"}, env={})
    f = tmp_path / "typed.json"
    f.write_text(json.dumps({"train": {"epochs": "2"}}))
    with pytest.raises(SchemaError, match="train.epochs"):
        load_config([f], env={})


def test_text_coercions():
    cfg = load_config(flags={"train.gamma": "2,0.2,1,1", "embed.adapt_geometry": "yes",
                             "sweep.attack_kinds": "rotation,crop", "train.max_steps": "7"}, env={})
    assert cfg.get("train.gamma") == [2.0, 0.2, 1.0, 1.0]
    assert cfg.get("embed.adapt_geometry") is True
    assert cfg.get("sweep.attack_kinds") == ["rotation", "crop"]
    assert cfg.get("train.max_steps") == 7
    assert load_config(flags={"sweep.alphas": "[0, 0.05]"}, env={}).get("sweep.alphas") == [0.0, 0.05]


def test_gamma_balance_warning():
    with pytest.warns(UserWarning, match="gamma0"):
        cfg = load_config(flags={"train.gamma": [1.0, 0.2, 1.0, 1.0]}, env={})
    assert cfg.get("train.gamma")[0] == 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_config(flags={"train.gamma": [4.0, 0.2, 2.0, 2.0]}, env={})


values = st.fixed_dictionaries({
    "train.lr": st.floats(1e-6, 1.0),
    "train.seed": st.integers(0, 10**6),
    "embed.user_id": st.integers(0, 9),
    "embed.prompt": st.text(max_size=30),
    "sweep.alphas": st.lists(st.floats(0, 1), max_size=5).map(sorted),
    "train.kappa": st.integers(0, 3),
})


@settings(max_examples=50)
@given(values)
def test_round_trip(tmp_path_factory, flags):
    cfg = load_config(flags=flags, env={})
    path = tmp_path_factory.mktemp("rt") / "cfg.json"
    cfg.dump(path)
    again = load_config([path], env={})
    assert again == cfg
    assert isinstance(again, RunConfig)


def test_schema_markdown_lists_every_key():
    text = schema_markdown()
    for sec, keys in SCHEMA.items():
        for k in keys:
            assert f"| {sec}.{k} |" in text
    assert text.endswith("\n")
    for line in text.splitlines():
        assert line.replace("\\|", "").count("|") == 5
