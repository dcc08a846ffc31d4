import json
import subprocess
import sys

import numpy as np
import pytest

from cskgp.errors import FactorizationFailed, ValidationError
from cskgp.harness import cli, oracle_suite
from cskgp.harness import data as D


def test_parse_grid():
    np.testing.assert_array_equal(cli.parse_grid("0:1:3"), [0.0, 0.5, 1.0])
    assert len(cli.parse_grid("-2:2:101")) == 101
    for bad in ("0:1", "a:b:c", "0:1:0", "0:inf:4"):
        with pytest.raises(ValidationError):
            cli.parse_grid(bad)


def test_usage_error_is_invalid_input():
    for argv in (["fit"], ["frobnicate"], ["sample-prior", "--kernel", "se", "--depth", "1",
                                           "--grid", "0:1:3", "--out", "x"]):
        with pytest.raises(SystemExit) as info:
            cli.main(argv)
        assert info.value.code == 1


def test_sample_prior(tmp_path, capsys):
    out = tmp_path / "prior.csv"
    assert cli.main(["sample-prior", "--kernel", "csk", "--depth", "2", "--grid", "0:1:30",
                     "--seed", "3", "--out", str(out)]) == 0
    ds_lines = out.read_text().splitlines()
    assert ds_lines[0] == "x,f0,f1,f2" and len(ds_lines) == 31
    first = out.read_text()
    cli.main(["sample-prior", "--kernel", "csk", "--depth", "2", "--grid", "0:1:30",
              "--seed", "3", "--out", str(out)])
    assert out.read_text() == first


def test_invalid_input_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    (tmp_path / "c.json").write_text("{}")
    code = cli.main(["fit", "--config", str(tmp_path / "c.json"), "--data", str(bad),
                     "--out", str(tmp_path / "m")])
    assert code == 1 and "error" in capsys.readouterr().err
    assert cli.main(["sample-prior", "--kernel", "nsq", "--depth", "20", "--grid", "0:1:5",
                     "--out", str(tmp_path / "p.csv")]) == 1
    assert cli.main(["predict", "--model", str(tmp_path / "none"), "--data", str(bad),
                     "--out", str(tmp_path / "o.csv")]) == 1


def test_numerical_failure_exits_2(monkeypatch, tmp_path, capsys):
    def boom(*a, **k):
        raise FactorizationFailed("no jitter level worked")

    monkeypatch.setattr(oracle_suite, "run_all", boom)
    assert cli.main(["oracle-suite"]) == 2
    assert "numerical failure" in capsys.readouterr().err


def test_oracle_suite_passes(capsys):
    assert cli.main(["oracle-suite"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == len(oracle_suite.CHECKS)


def test_fit_predict_spectrogram(tmp_path, capsys):
    ds = D.generate_chirp(40, 0.1, 0)
    D.write_csv(tmp_path / "train.csv", ds)
    cfg = {"inference": "map", "iterations": 30, "m_f": 8, "m_theta": 8}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    model = tmp_path / "m.nsgp"
    assert cli.main(["fit", "--config", str(tmp_path / "cfg.json"), "--data", str(tmp_path / "train.csv"),
                     "--out", str(model)]) == 0
    assert model.read_text().startswith("NSGP1\n")
    assert cli.main(["predict", "--model", str(model), "--data", str(tmp_path / "train.csv"),
                     "--out", str(tmp_path / "pred.csv"), "--metrics", str(tmp_path / "met.json")]) == 0
    met = json.loads((tmp_path / "met.json").read_text())
    assert met["n_test"] == 40 and met["test_mse"] >= 0
    assert (tmp_path / "pred.csv").read_text().splitlines()[0] == "t,y,mean,variance"
    assert cli.main(["spectrogram", "--model", str(model), "--x-grid", "-1:1:5",
                     "--out", str(tmp_path / "s.csv"), "--svg", str(tmp_path / "s.svg")]) == 0
    rows = np.loadtxt(tmp_path / "s.csv", delimiter=",", skiprows=1)
    assert rows.shape[1] == 3 and set(np.round(rows[:, 0], 12)) == {-1.0, -0.5, 0.0, 0.5, 1.0}
    assert (tmp_path / "s.svg").read_text().startswith("<svg")


def test_split_file(tmp_path):
    D.write_csv(tmp_path / "all.csv", D.generate_chirp(30, 0.1, 0))
    (tmp_path / "idx.txt").write_text("\n".join(str(i) for i in range(0, 30, 3)) + "\n")
    (tmp_path / "cfg.json").write_text(json.dumps({"inference": "map", "iterations": 0, "m_f": 5, "m_theta": 5}))
    common = ["--data", str(tmp_path / "all.csv"), "--split-file", str(tmp_path / "idx.txt")]
    assert cli.main(["fit", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "m.nsgp")]
                    + common) == 0
    assert cli.main(["predict", "--model", str(tmp_path / "m.nsgp"), "--out", str(tmp_path / "p.csv"),
                     "--metrics", str(tmp_path / "met.json")] + common) == 0
    assert json.loads((tmp_path / "met.json").read_text())["n_test"] == 20
    (tmp_path / "bad.txt").write_text("3\n99\n")
    assert cli.main(["predict", "--model", str(tmp_path / "m.nsgp"), "--out", str(tmp_path / "p.csv"),
                     "--data", str(tmp_path / "all.csv"), "--split-file", str(tmp_path / "bad.txt")]) == 1


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "cskgp.harness.cli", "sample-prior", "--kernel", "nsq",
                        "--depth", "0", "--grid", "0:1:4", "--out", str(tmp_path / "p.csv")],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert "wrote 1 layers" in r.stdout
