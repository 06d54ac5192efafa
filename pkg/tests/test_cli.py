import json
from pathlib import Path

from shardsim.cli import EXIT_BREACH, EXIT_INVALID, EXIT_OK, EXIT_UNSUPPORTED, main

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def test_enumerate(capsys):
    assert main(["enumerate"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "216"
    main(["enumerate", "--restrict", "isc=sync_bft,pbft"])
    assert capsys.readouterr().out.strip() == "108"
    main(["enumerate", "--restrict", "message_model=sync"])
    assert capsys.readouterr().out.strip() == "72"


def test_validate(capsys):
    assert main(["validate", str(CONFIGS / "omniledger.yaml")]) == EXIT_OK
    assert main(["validate", str(CONFIGS / "invalid_sync_bft.yaml")]) == EXIT_INVALID
    assert "violation" in capsys.readouterr().out
    assert main(["validate"]) == EXIT_INVALID
    assert main(["validate", "--schema"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["title"] == "ScenarioConfig"


def test_validate_unknown_key(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text("m: 2\nwidth: 3\n")
    assert main(["validate", str(p)]) == EXIT_INVALID
    assert "invalid" in capsys.readouterr().out


def test_run_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", str(CONFIGS / "omniledger.yaml"), "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["invariant_breaches"] == 0
    assert (out / "events.jsonl").read_text().count("\n") > 0
    assert (out / "accounts.csv").read_text().startswith("node,balance")
    head, row = (out / "summary.csv").read_text().splitlines()
    assert head.split(",")[0] == "throughput" and len(row.split(",")) == len(head.split(","))
    assert json.loads(capsys.readouterr().out) == report


def test_run_unsupported_and_invalid(tmp_path):
    p = tmp_path / "h.yaml"
    p.write_text("isc: hotstuff\n")
    assert main(["run", str(p)]) == EXIT_UNSUPPORTED
    p.write_text("rho: 0.45\n")
    assert main(["run", str(p)]) == EXIT_INVALID


def test_breach_exit_code(tmp_path, monkeypatch):
    from shardsim import cli
    from shardsim.scenario import InvariantBreach, omniledger_like

    def boom(cfg, seed):
        raise InvariantBreach("double-spend", cfg, 0, 42)

    monkeypatch.setattr(cli, "run", boom)
    assert main(["run", str(CONFIGS / "omniledger.yaml"), "--out", str(tmp_path)]) == EXIT_BREACH
    assert json.loads((tmp_path / "reproducer.json").read_text())["tick"] == 42


def test_sweep(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["sweep", str(CONFIGS / "omniledger.yaml"), "--axis", "rho", "--values", "0,0.1", "--out", str(out)]) == EXIT_OK
    assert len(out.read_text().splitlines()) == 3


def test_analyze(capsys):
    assert main(["analyze", "--u", "4", "--rho", "1/4", "--q0", "1/2", "--n", "12"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "n,m,u,rho,Q0,model,probability"
    assert lines[1] == "12,1,4,1/4,1/2,binomial,0.26171875"
    assert lines[2].startswith("12,1,4,1/4,1/2,hypergeometric,0.23636")
    main(["analyze", "--json", "--u", "4", "--rho", "1/4", "--q0", "1/2", "--n", "12"])
    doc = json.loads(capsys.readouterr().out)
    assert doc["binomial"]["value"] == 0.26171875
    assert doc["hypergeometric"]["exact"] == "13/55"
    main(["analyze", "--json", "--u", "12", "--rho", "1/4", "--q0", "2/3", "--n", "36", "--m", "3", "--trials", "2000"])
    doc = json.loads(capsys.readouterr().out)
    assert doc["monte_carlo"]["trials"] == 2000
