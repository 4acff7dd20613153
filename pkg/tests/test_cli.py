from __future__ import annotations

import csv
import io
import json
import os

import pytest

from switchpdmp.cli import ConfigError, main, parse_config, parse_value

PLANAR = """\
[model]
d = 2
lo = -3, -3
hi = 3, 3
lambda_bar = 3
field0 = "-x1 - x2", "x1 - x2"
field1 = "-(x1 - 1) - x2", "(x1 - 1) - x2"
rate0_1 = 1
rate1_0 = "1 + 0.1*x1^2"

[simulation]
seed = {seed}
horizon = 20
output_dt = 0.5
n_replicas = 2
start = 0.5, 0

[analysis]
resolution = 32
reach_mode = "{mode}"
n_starts = 4
gap_times = 5, 20
bins = 8

[output]
dir = "{out}"
"""

TORUS = """\
[model]
example = "torus"
d = 2

[simulation]
seed = 1

[analysis]
grid_per_axis = 4
kinds = "weak", "strong"
"""


def write_cfg(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def planar(tmp_path, seed=7, mode="accessible", out="out"):
    return write_cfg(tmp_path, PLANAR.format(seed=seed, mode=mode, out=tmp_path / out), f"{out}.ini")


def read_dir(path):
    return {n: (path / n).read_bytes() for n in sorted(os.listdir(path))}


# -- parsing ---------------------------------------------------------------


def test_parse_value():
    assert parse_value("3") == 3 and isinstance(parse_value("3"), int)
    assert parse_value("2.5e-3") == 2.5e-3
    assert parse_value("true") is True and parse_value("false") is False
    assert parse_value('"a, b"') == "a, b"
    assert parse_value('1, "x", false') == (1, "x", False)
    for bad in ("abc", '"open', "1,,2", ""):
        with pytest.raises(ConfigError):
            parse_value(bad)


@pytest.mark.parametrize(
    "text",
    [
        "[model]\nexample = \"torus\"\n",  # seed missing
        "[model]\nexample = \"torus\"\n[simulation]\nseed = 1\nsede = 2\n",
        "[model]\nexample = \"torus\"\nradius = 2\n[simulation]\nseed = 1\n",
        "[model]\nexample = \"nope\"\n[simulation]\nseed = 1\n",
        "[model]\nexample = \"torus\"\n[simulation]\nseed = 1\n[plots]\nx = 1\n",
        "[model]\nexample = \"torus\"\n[simulation]\nseed = -1\n",
        "[model]\nexample = \"torus\"\n[simulation]\nseed = 1\nhorizon = -5\n",
        "[model]\nexample = \"torus\"\n[simulation]\nseed = 1\n[analysis]\nreach_mode = \"all\"\n",
        "[model]\nd = 2\n[simulation]\nseed = 1\n",
        "[model]\nexample = \"torus\"\n[simulation]\nseed = 1.5\n",
        "no section\n",
    ],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_defaults_and_hash():
    cfg = parse_config(TORUS)
    assert cfg.seed == 1
    assert cfg.simulation["n_replicas"] == 1
    assert cfg.analysis["kinds"] == ("weak", "strong")
    assert len(cfg.sha256) == 64 and cfg.text == TORUS


# -- exit codes --------------------------------------------------------------


def test_unknown_key_exit_code(tmp_path, capsys):
    path = write_cfg(tmp_path, TORUS.replace("seed = 1", "seed = 1\ncolour = 2"))
    assert main(["simulate", path, "--out", str(tmp_path / "o")]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "ConfigError" and "colour" in err["message"]
    assert json.loads((tmp_path / "o" / "error.json").read_text())["exit_code"] == 1


def test_missing_file_and_bad_threads(tmp_path):
    assert main(["simulate", str(tmp_path / "absent.ini")]) == 1
    assert main(["simulate", planar(tmp_path), "--threads", "0"]) == 1


def test_runtime_error_exit_code(tmp_path):
    text = PLANAR.format(seed=1, mode="reachable", out=tmp_path / "o")
    text = text.replace("[analysis]", "[analysis]\ntau = 10")
    assert main(["reach", write_cfg(tmp_path, text)]) == 2


def test_validate_blocking(tmp_path):
    text = PLANAR.format(seed=1, mode="reachable", out=tmp_path / "v").replace('rate0_1 = 1', 'rate0_1 = "-1"')
    assert main(["validate", write_cfg(tmp_path, text)]) == 1
    rep = json.loads((tmp_path / "v" / "validation.json").read_text())
    assert "negative rate" in " ".join(rep["blocking"])
    assert main(["validate", planar(tmp_path, out="ok")]) == 0


# -- outputs -----------------------------------------------------------------


def test_simulate_byte_identical(tmp_path):
    assert main(["simulate", planar(tmp_path, out="a")]) == 0
    assert main(["simulate", planar(tmp_path, out="b"), "--threads", "2"]) == 0
    a, b = read_dir(tmp_path / "a"), read_dir(tmp_path / "b")
    assert set(a) == {"manifest.json", "simulate.json", "skeleton_r0.json", "skeleton_r1.json", "path_r0.csv", "path_r1.csv"}
    for name in a:
        if name != "manifest.json":  # the manifest embeds the output dir via the config
            assert a[name] == b[name], name
    assert main(["simulate", planar(tmp_path, seed=8, out="c")]) == 0
    assert read_dir(tmp_path / "c")["skeleton_r0.json"] != a["skeleton_r0.json"]
    assert a["skeleton_r0.json"] != a["skeleton_r1.json"]


def test_reach_byte_identical(tmp_path):
    for out in ("a", "b"):
        assert main(["reach", planar(tmp_path, out=out)]) == 0
    a, b = read_dir(tmp_path / "a"), read_dir(tmp_path / "b")
    assert {"reach.csv", "reach.pgm", "reach.json"} <= set(a)
    for name in ("reach.csv", "reach.pgm", "reach.json"):
        assert a[name] == b[name]


def test_manifest_round_trip(tmp_path):
    assert main(["simulate", planar(tmp_path, out="a")]) == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 7 and man["command"] == "simulate" and man["tool"] == "switchpdmp"
    assert set(man) == {"tool", "version", "stream", "command", "seed", "config", "config_sha256", "outputs"}
    import hashlib

    for name, digest in man["outputs"].items():
        assert hashlib.sha256((tmp_path / "a" / name).read_bytes()).hexdigest() == digest
    # re-running the embedded config reproduces every output
    replay = write_cfg(tmp_path, man["config"], "replay.ini")
    assert main(["simulate", replay, "--out", str(tmp_path / "r")]) == 0
    again = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert again["outputs"] == man["outputs"]


def test_no_temporary_files_left(tmp_path):
    assert main(["occupation", planar(tmp_path, out="a")]) == 0
    names = os.listdir(tmp_path / "a")
    assert not [n for n in names if n.startswith(".") or n.endswith(".tmp")]
    assert {"continuous_r0.csv", "discrete_r0.csv", "histogram_r0.csv", "gap.json"} <= set(names)
    gap = json.loads((tmp_path / "a" / "gap.json").read_text())
    assert [g["t"] for g in gap["replicas"][0]["gaps"]] == [5, 20]


def test_torus_brackets_csv(tmp_path):
    path = write_cfg(tmp_path, TORUS)
    assert main(["brackets", path, "--out", str(tmp_path / "b")]) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "b" / "brackets.csv").read_text())))
    assert len(rows) == 2 * 16
    assert all(r["satisfied"] == "true" for r in rows if r["kind"] == "weak")
    assert all(r["satisfied"] == "false" for r in rows if r["kind"] == "strong")


def test_omega_and_reachable_modes(tmp_path):
    for mode in ("reachable", "omega"):
        assert main(["reach", planar(tmp_path, mode=mode, out=mode)]) == 0
        rep = json.loads((tmp_path / mode / "reach.json").read_text())
        assert rep["mode"] == mode and rep["n_occupied"] > 0


def test_verify_commands(tmp_path, capsys):
    assert main(["verify", "torus"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["pass"] and res["brackets"]["strong_satisfied"] == 0
    assert main(["verify", "radulescu", "--param", "alpha=2.5"]) == 0
    assert json.loads(capsys.readouterr().out)["params"]["alpha"] == 2.5
    assert main(["verify", "interval_beta", "--lambda", "2"]) == 1  # no seed
    assert main(["verify", "radulescu", "--lambda", "2"]) == 1
    assert main(["verify", "lorenz"]) == 1
    assert main(["verify", "torus", "--param", "colour=1"]) == 1


def test_verify_beta_sampled(tmp_path, capsys):
    out = tmp_path / "v"
    assert main(["verify", "interval_beta", "--lambda", "2", "--seed", "42", "--horizon", "1e4", "--out", str(out)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["ks"] < res["ks_threshold"]
    assert json.loads((out / "verify.json").read_text()) == res
