import csv
import io
import json

import pytest
from hypothesis import given, strategies as st

from markplugger.metrics import EvalReport
from markplugger.reports import ATTACK_COLUMNS, emit_report, render, to_csv, to_json, to_markdown

REPORT = EvalReport(psnr_db=35.1234, ssim_pct=97.5, lpips=0.0123, nc_pct=93.25, ca=4.5, cer_pct=6.75,
                    sample_count=50, delta_fid=-1.35, p_delta_fid_pct=5.07)


def test_eval_markdown_has_grouped_header():
    text = to_markdown(dict(REPORT.to_dict(), model="stub kappa=3"))
    lines = text.splitlines()
    assert "Watermark invisibility" in lines[0]
    assert "Watermark recoverability" in lines[0]
    assert "Image quality" in lines[0]
    assert lines[2].startswith("| model | PSNR (dB) | SSIM (%) | LPIPS | NC (%) | CA | CER (%) | dFID |")
    assert "| stub kappa=3 | 35.12 |" in lines[3]
    assert text.endswith("\n")


def test_eval_markdown_skips_missing_fid():
    d = EvalReport(30.0, 90.0, 0.1, 91.0, 1.0, 2.0, 5).to_dict()
    assert "Image quality" not in to_markdown(d)


def test_attack_csv_columns():
    rows = [{"kind": "rotation", "intensity": 15.0, "nc_pct": 80.123456, "cer_pct": 20.0, "psnr_db": 30.0},
            {"kind": "crop", "intensity": 256.0, "nc_pct": 50.0, "cer_pct": 60.0, "psnr_db": 31.0}]
    text = to_csv(rows, ATTACK_COLUMNS)
    parsed = list(csv.reader(io.StringIO(text)))
    assert parsed[0] == list(ATTACK_COLUMNS)
    assert parsed[1] == ["rotation", "15.0000", "80.1235", "20.0000"]


def test_json_sorted_and_terminated():
    text = to_json({"b": 1, "a": [1.5, None]})
    assert text.index('"a"') < text.index('"b"')
    assert text.endswith("\n")
    assert json.loads(text) == {"a": [1.5, None], "b": 1}


def test_unknown_format():
    with pytest.raises(ValueError):
        render({}, "xml")


def test_non_tabular_rejected():
    with pytest.raises(TypeError):
        to_csv([1, 2])


rows = st.lists(st.fixed_dictionaries({"kind": st.sampled_from(["rotation", "crop"]),
                                       "intensity": st.floats(0, 512),
                                       "nc_pct": st.floats(-100, 100), "cer_pct": st.floats(0, 100)}),
                min_size=1, max_size=5)


@given(rows, st.sampled_from(["json", "csv", "markdown"]))
def test_same_report_twice_is_byte_identical(tmp_path_factory, data, fmt):
    d = tmp_path_factory.mktemp("r")
    p1 = emit_report(data, fmt, d / "one")
    p2 = emit_report(data, fmt, d / "two")
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes().endswith(b"\n")
    assert p1.suffix == {"json": ".json", "csv": ".csv", "markdown": ".md"}[fmt]
