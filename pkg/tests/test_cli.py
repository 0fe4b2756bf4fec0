import json

import pytest

from gexpect import estimates
from gexpect.cli import cmd_check, cmd_expect, cmd_represent, cmd_simulate, cmd_verify, main, resolve_config
from gexpect.cli import build_parser
from gexpect.config import ConfigError, RunConfig, dump_config, load_config, parse_controls

SMALL = dict(x_min=-10.0, x_max=10.0, nx=81, paths=50, steps=20)


def test_check_outputs(capsys):
    assert main(["check", "max(b1,0) + abs(b2)"]) == 0
    assert capsys.readouterr().out.strip() == "max(b1, 0) + abs(b2)"
    assert main(["check", "max(b1, 0"]) == 2
    out = capsys.readouterr().out
    assert "column 10" in out and out.count("column") == 1
    assert main(["check", "--payoff", "exp(b1)"]) == 2
    assert capsys.readouterr().out.startswith("invalid payoff:")
    assert cmd_check("b1*b2") == 0
    assert "warning" in capsys.readouterr().out


def test_expect_json_and_surface(tmp_path, capsys):
    cfg = RunConfig(payoff="b1*b1", out=str(tmp_path), **SMALL)
    v = cmd_expect(cfg, dump_surface=True)
    assert v == pytest.approx(4.0, abs=1e-6)
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "E_G[b1 * b1] = 4.000000" and lines[1].startswith("grid:")
    d = json.loads((tmp_path / "expect.json").read_text())
    assert d["value"] == v and d["grid"]["nx"] == 81 and d["config"]["payoff"] == "b1*b1"
    assert (tmp_path / "surface.csv").read_text().startswith("t,x,v,vx,vxx\n")
    with pytest.raises(ConfigError):
        cmd_expect(RunConfig(**SMALL), dump_surface=True)


def test_expect_via_main(capsys):
    from gexpect.payoff import UnboundedPayoffWarning

    with pytest.warns(UnboundedPayoffWarning):
        assert main(["expect", "--payoff=-(b1*b1)", "--x-min", "-10", "--x-max", "10", "--nx", "81"]) == 0
    assert capsys.readouterr().out.startswith("E_G[-(b1 * b1)] = -1.000000")


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[driver]\nsigma_bar_sq = 2\n[run]\npayoff = abs(b1)\ntimes = 0.5, 1\npaths = 30\n")
    cfg = load_config(p)
    assert (cfg.sigma_bar_sq, cfg.payoff, cfg.times, cfg.paths) == (2.0, "abs(b1)", (0.5, 1.0), 30)
    args = build_parser().parse_args(["expect", "--config", str(p), "--paths", "99"])
    cfg2 = resolve_config(args)
    assert cfg2.paths == 99 and cfg2.sigma_bar_sq == 2.0
    # round trip through the dumped INI
    q = tmp_path / "dump.ini"
    q.write_text(dump_config(cfg2))
    assert load_config(q).resolved() == cfg2.resolved()


@pytest.mark.parametrize("text", ["[grid]\nbogus = 1\n", "[other]\nnx = 1\n", "[grid]\nnx = many\n"])
def test_config_rejects_bad_input(tmp_path, text):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


def test_parse_controls():
    assert parse_controls("extremes, piecewise:3,feedback") == [("extremes", 0), ("piecewise", 3), ("feedback", 0)]
    for bad in ("", "wild", "piecewise:x", "extremes:2"):
        with pytest.raises(ConfigError):
            parse_controls(bad)


def test_represent_outputs(tmp_path, capsys):
    cfg = RunConfig(payoff="abs(b1)", out=str(tmp_path), **SMALL)
    rep = cmd_represent(cfg)
    assert rep["control"] == "feedback"
    assert {r["control"] for r in rep["controls"]} >= {"const(1)", "const(4)", "feedback"}
    assert json.loads((tmp_path / "report.json").read_text())["expectation"] == rep["expectation"]
    assert (tmp_path / "representation.csv").read_text().startswith("path_id,t,B,z,eta,A\n")


def test_simulate_outputs(tmp_path, capsys):
    cfg = RunConfig(payoff="abs(b1)", out=str(tmp_path), **SMALL)
    s = cmd_simulate(cfg)
    assert s["argmax"] in {r["control"] for r in s["records"]}
    assert s["estimate"] == max(r["mean"] for r in s["records"])
    assert json.loads((tmp_path / "mc.json").read_text())["pde_value"] == s["pde_value"]
    assert (tmp_path / "paths.csv").read_text().startswith("path_id,t,B,QV\n")


def test_verify_payoff_suite(tmp_path):
    cfg = RunConfig(payoff="abs(b1)", suite="payoff", out=str(tmp_path), **SMALL)
    assert cmd_verify(cfg) == 0
    lines = (tmp_path / "verify.jsonl").read_text().splitlines()
    head = json.loads(lines[0])
    assert set(head) == {"timestamp", "config"}
    names = [json.loads(x)["name"] for x in lines[1:]]
    assert names[0] == "A_monotone[abs(b1)]" and names[-1] == "apriori[abs(b1)]"


def test_verify_exit_status_on_unexpected_outcome(monkeypatch, capsys):
    def suite(cfg):
        yield estimates.EstimateReport("fine", 0.0, 1.0)
        yield estimates.EstimateReport("negative control that passed", 0.0, 1.0, expected_pass=False)

    monkeypatch.setattr(estimates, "default_suite", suite)
    assert cmd_verify(RunConfig()) == 1
    captured = capsys.readouterr()
    assert len(captured.out.splitlines()) == 3
    assert "negative control that passed" in captured.err


def test_main_config_error(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[grid]\nbogus = 1\n")
    assert main(["expect", "--config", str(p)]) == 2
    assert "config error" in capsys.readouterr().err


def test_config_inline_comments(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[grid]\nnx = 101   ; odd node count\n[run]\npayoff = abs(b1)  ; kink at 0\n")
    cfg = load_config(p)
    assert cfg.nx == 101 and cfg.payoff == "abs(b1)"
