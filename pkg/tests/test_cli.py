import json
import math

import pytest

from hjbcheck.cli import jsonable, load_entry, main
from hjbcheck.config import DEFAULTS, ConfigError, load_config


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def test_print_defaults(capsys):
    code, out, _ = run(["--print-defaults"], capsys)
    assert code == 0
    for key in ("mesh", "hjb_tol", "dist_tol", "max_enumeration"):
        assert key in out


def test_no_command(capsys):
    assert run([], capsys)[0] == 64


def test_unknown_problem(tmp_path, capsys):
    code, _, err = run(["verify", "--problem", "nosuch", "--out", str(tmp_path)], capsys)
    assert code == 64 and "sin1x" in err


def test_unknown_flag():
    with pytest.raises(SystemExit) as exc:
        main(["verify", "--problem", "sin1x", "--frobnicate"])
    assert exc.value.code == 64


def test_missing_problem(tmp_path, capsys):
    assert run(["verify", "--out", str(tmp_path)], capsys)[0] == 64


@pytest.mark.parametrize("argv", [
    ["verify", "--problem", "infinite_decay", "--theorem", "teo1"],
    ["verify", "--problem", "sin1x", "--theorem", "teo2"],
    ["verify", "--problem", "sin1x", "--eps", "0.1"],
])
def test_mode_usage_errors(argv, tmp_path, capsys):
    assert run(argv + ["--out", str(tmp_path)], capsys)[0] == 64


def test_unwritable_output(capsys):
    assert run(["verify", "--problem", "counterexample_L", "--out", "/proc/forbidden"], capsys)[0] == 74


def test_verify_counterexample_fails(tmp_path, capsys):
    code, out, _ = run(["verify", "--problem", "counterexample_L", "--mesh", "0.03125", "--out", str(tmp_path)], capsys)
    assert code == 2
    assert json.loads(out)["verdicts"]["v"] == "fail"
    rep = read_json(tmp_path / "report.json")
    assert rep["conclusion"] == "fail"
    assert [h["id"] for h in rep["hypotheses"] if h["verdict"] == "fail"] == ["v"]
    assert rep["global"]["grid"]["mesh"] == 0.03125
    header = (tmp_path / "residuals.csv").read_text().splitlines()[0]
    assert header == "t,x1,residual,excluded"


def test_verify_is_deterministic(tmp_path, capsys):
    docs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        out.mkdir()
        run(["verify", "--problem", "counterexample_L", "--mesh", "0.03125", "--seed", "3", "--out", str(out)], capsys)
        rep = read_json(out / "report.json")
        rep["global"].pop("wall_ms")
        docs.append((rep, (out / "residuals.csv").read_text()))
    assert docs[0] == docs[1]


def test_verify_sin1x_passes(tmp_path, capsys):
    code, out, _ = run(["verify", "--problem", "sin1x", "--mesh", "0.015625", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert json.loads(out)["conclusion"] == "pass"


def test_verify_eps_certificate(tmp_path, capsys):
    code, _, _ = run(["verify", "--problem", "sin1x", "--mesh", "0.015625", "--theorem", "eps", "--eps", "0.01",
                      "--g-l1", "1", "--out", str(tmp_path)], capsys)
    assert code == 0
    cert = read_json(tmp_path / "report.json")["certificate"]
    assert cert["certified"] and cert["bound"] == pytest.approx(0.02)


def test_value_brute(capsys):
    code, out, _ = run(["value", "--problem", "sin1x", "--method", "brute", "--start", "0", str(2 / math.pi)], capsys)
    assert code == 0
    assert json.loads(out)["value"] == pytest.approx(1.0, abs=1e-9)


def test_value_guard(capsys):
    code, out, _ = run(["value", "--problem", "oscillator", "--method", "brute", "--pieces", "9", "--samples", "5"],
                       capsys)
    assert code == 65
    assert json.loads(out)["size"] == 5**9


def test_value_brute_needs_start(capsys):
    assert run(["value", "--problem", "sin1x", "--method", "brute"], capsys)[0] == 64


def test_value_synthesis(capsys):
    code, out, _ = run(["value", "--problem", "oscillator", "--method", "synthesis", "--start", "2", "0"], capsys)
    assert code == 0
    assert json.loads(out)["value"] == pytest.approx(math.pi, abs=1e-6)


def test_value_bad_start(capsys):
    assert run(["value", "--problem", "oscillator", "--method", "synthesis", "--start", "2"], capsys)[0] == 64


def test_value_dp_writes_grid(tmp_path, capsys):
    code, out, _ = run(["value", "--problem", "sin1x", "--method", "dp", "--mesh", "0.0625", "--start", "0", "0.5",
                        "--out", str(tmp_path)], capsys)
    assert code == 0
    doc = json.loads(out)
    assert (tmp_path / "value_grid.csv").exists()
    assert doc["value"] == pytest.approx(math.sin(2.0), abs=0.0625)


def test_compare_sin1x(tmp_path, capsys):
    code, out, _ = run(["compare", "--problem", "sin1x", "--points", "20", "--out", str(tmp_path)], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["max_w_minus_v_hat"] <= doc["slack"]
    rows = (tmp_path / "compare.csv").read_text().splitlines()
    assert len(rows) == 21 and rows[0].startswith("t,x1,W,V_hat")


def test_compare_counterexample_diverges(tmp_path, capsys):
    code, out, _ = run(["compare", "--problem", "counterexample_L", "--points", "3", "--out", str(tmp_path)], capsys)
    assert code == 2
    dv = json.loads(out)["divergence"]
    assert dv["costs_at_first_point"][-1] < -1e3


def write_config(tmp_path, text):
    path = tmp_path / "run.toml"
    path.write_text(text)
    return str(path)


def test_config_flags_win(tmp_path, capsys):
    cfg = write_config(tmp_path, 'problem = "counterexample_L"\nmesh = 0.0625\nseed = 5\n')
    run(["verify", "--config", cfg, "--mesh", "0.03125", "--out", str(tmp_path)], capsys)
    rep = read_json(tmp_path / "report.json")
    assert rep["global"]["grid"]["mesh"] == 0.03125
    assert rep["global"]["seed"] == 5


def test_config_unknown_key(tmp_path, capsys):
    cfg = write_config(tmp_path, 'problem = "sin1x"\nfrobnicate = 1\n')
    assert run(["verify", "--config", cfg, "--out", str(tmp_path)], capsys)[0] == 64


def test_config_missing_file(tmp_path, capsys):
    assert run(["verify", "--config", str(tmp_path / "none.toml"), "--problem", "sin1x"], capsys)[0] == 64


def test_config_dashes_and_params(tmp_path):
    cfg = load_config(write_config(tmp_path, 'tol-hjb = 1e-4\n[params]\neta = 0.25\n'))
    assert cfg["tol_hjb"] == 1e-4
    entry = load_entry({"problem": "infinite_decay", "params": cfg["params"]})
    assert entry.problem.target_neighborhood.contains([0.0], [[0.2]])[0]
    assert not entry.problem.target_neighborhood.contains([0.0], [[0.3]])[0]


def test_config_bad_params(tmp_path, capsys):
    cfg = write_config(tmp_path, 'problem = "sin1x"\n[params]\neta = 0.25\n')
    assert run(["verify", "--config", cfg, "--out", str(tmp_path)], capsys)[0] == 64


def test_config_rejects_nonpositive_tolerance(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, "dist_tol = 0\n"))


def test_defaults_table_has_meanings():
    assert all(len(v) == 2 and v[1] for v in DEFAULTS.values())


def test_jsonable_nonfinite():
    assert json.loads(json.dumps(jsonable({"a": math.inf, "b": [math.nan, -math.inf, 1.0]}))) == {
        "a": "inf", "b": ["nan", "-inf", 1.0]}
