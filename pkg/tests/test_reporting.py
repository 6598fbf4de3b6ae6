import json
import math

import numpy as np
import pytest

from nbodykam.reporting import (
    build_manifest,
    canonical_json,
    csv_text,
    fmt,
    pretty_json,
    sha256_text,
    write_text,
)


def test_fmt_17_significant_digits():
    assert fmt(1.0 / 3.0) == "0.33333333333333331"
    assert fmt(math.pi) == "3.1415926535897931"
    # round trip is exact at this precision
    for x in (1e-300, 123456.789, 2.0**-52, 1.0 + 2.0**-52):
        assert float(fmt(x)) == x


def test_fmt_special_values():
    assert fmt(float("nan")) == "nan"
    assert fmt(float("inf")) == "inf"
    assert fmt(float("-inf")) == "-inf"
    assert fmt(True) == "true"
    assert fmt(False) == "false"
    assert fmt(None) == ""
    assert fmt(42) == "42"
    assert fmt(np.float64(0.5)) == "0.5"
    assert fmt("label") == "label"


def test_csv_text_layout():
    text = csv_text(["a", "b"], [[1, 2.5], [3, float("nan")]])
    lines = text.split("\n")
    assert lines[0] == "a,b"
    assert lines[1] == "1,2.5"
    assert lines[2] == "3,nan"
    assert text.endswith("\n")
    assert "\r" not in text


def test_write_text_preserves_lf(tmp_path):
    p = tmp_path / "out.csv"
    write_text(p, "a,b\n1,2\n")
    raw = p.read_bytes()
    assert raw == b"a,b\n1,2\n"


def test_canonical_json_deterministic():
    a = canonical_json({"b": 1, "a": [1.5, 2]})
    b = canonical_json({"a": [1.5, 2], "b": 1})
    assert a == b
    assert a.endswith("\n")
    assert json.loads(a) == {"a": [1.5, 2], "b": 1}


def test_canonical_json_handles_numpy_and_nonfinite():
    doc = {"x": np.float64(2.5), "y": np.arange(3), "z": float("inf"),
           "w": float("nan")}
    text = canonical_json(doc)
    back = json.loads(text)
    assert back["x"] == 2.5
    assert back["y"] == [0, 1, 2]
    # non-finite floats are carried as strings, never as bare tokens
    assert back["z"] == "inf"
    assert back["w"] == "nan"


def test_pretty_json_parses():
    text = pretty_json({"k": [1, 2]})
    assert json.loads(text) == {"k": [1, 2]}


def test_sha256_text_known_value():
    assert sha256_text("") == (
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855")


def test_build_manifest_shape():
    scen = {"task": "ejection", "system": {"masses": [1.0, 1.0]}}
    outputs = {"a.csv": "x,y\n1,2\n"}
    m = build_manifest(scen, outputs, 0.25)
    assert m["scenario"] == scen
    assert m["inputs_sha256"] == sha256_text(canonical_json(scen))
    assert m["outputs"]["a.csv"]["sha256"] == sha256_text(outputs["a.csv"])
    assert m["outputs"]["a.csv"]["bytes"] == len(outputs["a.csv"].encode())
    assert set(m["versions"]) == {"nbodykam", "numpy", "scipy", "python"}
    assert m["wall_time_s"] == pytest.approx(0.25)
