import json
import subprocess
import sys

import numpy as np
import pytest

from igbnn import cli, data, training
from igbnn.evaluation import MetricsRecord

SMALL = ["data.train_count=60", "data.test_count=40", "network.hidden=8", "svgd.n_particles=3",
         "train.epochs=2", "train.batch_size=20", "attack.steps=2", "eval.steps=3",
         "attack.eps=0.1", "attack.alpha=0.025", "eval.eps=0.1", "eval.alpha=0.025"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def sets(extra=()):
    args = []
    for s in [*SMALL, *extra]:
        args += ["--set", s]
    return args


def error_of(err):
    lines = [line for line in err.splitlines() if line.strip()]
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--out", str(out / "a"), *sets()]) == 0
    return out / "a"


class TestTrain:
    def test_outputs(self, trained):
        assert {p.name for p in trained.iterdir()} == {"config.echo", "checkpoint.igck", "metrics.jsonl"}
        recs = [MetricsRecord.from_json(line) for line in (trained / "metrics.jsonl").read_text().splitlines()]
        assert [r.tag for r in recs] == ["epoch", "epoch", "final"]
        assert recs[-1].bound_rhs >= recs[-1].gap
        ck = training.restore(trained / "checkpoint.igck")
        assert ck.epoch == 2 and ck.ensemble.n == 3

    def test_deterministic(self, trained, tmp_path, capsys):
        code, _, _ = run(capsys, "train", "--out", str(tmp_path / "b"), *sets())
        assert code == 0
        for name in ("metrics.jsonl", "checkpoint.igck", "config.echo"):
            assert (tmp_path / "b" / name).read_bytes() == (trained / name).read_bytes()

    def test_zero_epochs(self, tmp_path, capsys):
        code, out, _ = run(capsys, "train", "--out", str(tmp_path / "z"), *sets(["train.epochs=0"]))
        assert code == 0 and json.loads(out)["epochs"] == 0
        lines = (tmp_path / "z" / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(x)["tag"] for x in lines] == ["final"]
        assert training.restore(tmp_path / "z" / "checkpoint.igck").epoch == 0

    def test_refuses_non_empty_out(self, trained, capsys):
        code, _, err = run(capsys, "train", "--out", str(trained), *sets())
        assert code == 4 and error_of(err)["error"] == "out_dir_not_empty"

    def test_overwrite(self, tmp_path, capsys):
        (tmp_path / "o").mkdir()
        (tmp_path / "o" / "junk").write_text("x")
        assert run(capsys, "train", "--out", str(tmp_path / "o"), "--overwrite", *sets())[0] == 0

    def test_resume_matches(self, trained, tmp_path, capsys):
        first = tmp_path / "one"
        assert run(capsys, "train", "--out", str(first), *sets(["train.epochs=1"]))[0] == 0
        code, _, _ = run(capsys, "train", "--out", str(tmp_path / "two"), "--resume",
                         str(first / "checkpoint.igck"), *sets())
        assert code == 0
        full = training.restore(trained / "checkpoint.igck").ensemble.particles
        resumed = training.restore(tmp_path / "two" / "checkpoint.igck").ensemble.particles
        assert full.tobytes() == resumed.tobytes()

    def test_config_file_and_echo(self, tmp_path, capsys):
        (tmp_path / "c.ini").write_text("[train]\nepochs = 1\n")
        code, _, _ = run(capsys, "train", "--config", str(tmp_path / "c.ini"), "--out", str(tmp_path / "r"),
                         *sets(["train.epochs=1"]))
        assert code == 0
        assert "epochs = 1" in (tmp_path / "r" / "config.echo").read_text()

    def test_numeric_abort(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--out", str(tmp_path / "n"), *sets(["svgd.step_size=1e300"]))
        assert code == 3 and error_of(err)["error"] == "numeric"


class TestErrors:
    def test_unknown_key(self, tmp_path, capsys):
        code, out, err = run(capsys, "train", "--out", str(tmp_path / "x"), "--set", "train.bogus=1")
        assert code == 2 and out == ""
        e = error_of(err)
        assert e["exit"] == 2 and "train.bogus" in e["message"]

    def test_usage(self, capsys):
        code, _, err = run(capsys, "curve")
        assert code == 2 and error_of(err)["error"] == "usage"
        code, _, err = run(capsys, "nonsense")
        assert code == 2

    def test_missing_config_file(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path / "o"))
        assert code == 4 and error_of(err)["error"] == "io"

    def test_corrupt_checkpoint(self, trained, tmp_path, capsys):
        buf = bytearray((trained / "checkpoint.igck").read_bytes())
        buf[30] ^= 0xFF
        (tmp_path / "bad.igck").write_bytes(bytes(buf))
        code, _, err = run(capsys, "riskgap", "--checkpoint", str(tmp_path / "bad.igck"), *sets())
        assert code == 4 and "corrupt checkpoint" in error_of(err)["message"]

    def test_shape_mismatch(self, trained, capsys):
        code, _, err = run(capsys, "riskgap", "--checkpoint", str(trained / "checkpoint.igck"),
                           *sets(["data.source=blobs", "data.classes=4"]))
        assert code == 2 and error_of(err)["error"] == "shape_mismatch"

    def test_bad_threads(self, trained, capsys):
        code, _, _ = run(capsys, "curve", "--checkpoint", str(trained / "checkpoint.igck"), "--threads", "0")
        assert code == 2


class TestEvalCommands:
    def test_riskgap(self, trained, tmp_path, capsys):
        ck = str(trained / "checkpoint.igck")
        code, out, _ = run(capsys, "riskgap", "--checkpoint", ck, *sets())
        rec = json.loads(out)
        assert code == 0 and rec["bound_holds"] and rec["bound_rhs"] >= rec["gap"]
        assert len(rec["config_digest"]) == 16
        code, out, _ = run(capsys, "riskgap", "--checkpoint", ck, "--eps", "0", *sets())
        assert json.loads(out)["gap"] == 0.0

    def test_curve(self, trained, tmp_path, capsys):
        ck = str(trained / "checkpoint.igck")
        code, out, _ = run(capsys, "curve", "--checkpoint", ck, *sets())
        rows = out.strip().splitlines()
        assert code == 0 and rows[0] == "epsilon,accuracy" and len(rows) == 16
        accs = [float(r.split(",")[1]) for r in rows[1:]]
        assert all(b <= a for a, b in zip(accs, accs[1:]))
        code, _, _ = run(capsys, "curve", "--checkpoint", ck, "--eps", "0:0.02:0.01", "--out",
                         str(tmp_path / "c.csv"), "--dump-adv", str(tmp_path / "adv.igds"), *sets())
        assert code == 0
        assert len((tmp_path / "c.csv").read_text().splitlines()) == 4
        adv = data.load_dataset(tmp_path / "adv.igds")
        assert len(adv) == 40
        code, _, err = run(capsys, "curve", "--checkpoint", ck, "--out", str(tmp_path / "c.csv"), *sets())
        assert code == 4

    @pytest.mark.parametrize("method", ["eot_pgd", "fgsm", "square"])
    def test_attack(self, trained, capsys, method):
        code, out, _ = run(capsys, "attack", "--checkpoint", str(trained / "checkpoint.igck"),
                           "--method", method, *sets(["eval.query_budget=50"]))
        rec = json.loads(out)
        assert code == 0 and rec["method"] == method and 0 <= rec["robust_accuracy"] <= rec["clean_accuracy"] + 0.1

    def test_transfer(self, trained, tmp_path, capsys):
        ck = str(trained / "checkpoint.igck")
        code, out, _ = run(capsys, "transfer", "--checkpoint", ck, *sets())
        rows = out.strip().splitlines()
        assert code == 0 and rows[0] == "source,p0,p1,p2" and len(rows) == 4
        code, _, _ = run(capsys, "transfer", "--checkpoint", ck, "--threads", "2", "--out",
                         str(tmp_path / "t.csv"), *sets())
        assert code == 0
        got = np.array([[float(v) for v in r.split(",")[1:]] for r in rows[1:]])
        np.testing.assert_array_equal(got, np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1,
                                                      usecols=(1, 2, 3)))

    def test_transfer_single_particle(self, tmp_path, capsys):
        out = tmp_path / "p"
        assert run(capsys, "train", "--out", str(out), *sets(["train.mode=plain_adv", "train.epochs=0"]))[0] == 0
        code, _, err = run(capsys, "transfer", "--checkpoint", str(out / "checkpoint.igck"), *sets())
        assert code == 2 and error_of(err)["error"] == "too_few_particles"


class TestGenData:
    def test_igds_and_csv(self, tmp_path, capsys):
        code, _, _ = run(capsys, "gen-data", "--count", "50", "--seed", "3", "--out", str(tmp_path / "m.igds"))
        assert code == 0 and data.load_dataset(tmp_path / "m.igds") == data.gen_two_moons(50, 0.15, 3)
        code, _, _ = run(capsys, "gen-data", "--kind", "blobs", "--count", "40", "--classes", "4",
                         "--out", str(tmp_path / "b.csv"))
        assert code == 0 and data.load_csv(tmp_path / "b.csv").n_classes == 4
        assert run(capsys, "gen-data", "--out", str(tmp_path / "m.igds"))[0] == 4

    def test_invalid_count(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--count", "1", "--out", str(tmp_path / "x.igds"))
        assert code == 2 and error_of(err)["exit"] == 2


class TestGradcheck:
    def test_injected_fault_names_op(self, capsys):
        code, out, err = run(capsys, "gradcheck", "--inject", "mul")
        assert code == 1
        e = error_of(err)
        assert "mul" in e["failed"]
        assert any(line.startswith("mul") and line.endswith("FAIL") for line in out.splitlines())

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "igbnn", "gen-data", "--count", "0", "--out", "/dev/null/x"],
                              capture_output=True, text=True)
        assert proc.returncode == 2
        assert json.loads(proc.stderr)["exit"] == 2
