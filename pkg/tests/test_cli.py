import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from darkisp.cli import main
from darkisp.linear_isp import BINNING, LinearParams, apply_matrix, compose
from darkisp.raw_io import load_bayer, load_rgb
from darkisp.trainer import Checkpoint, evaluate_model, load_dataset


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def dataset(tmp_path, capsys):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps({"count": 2, "size": [32, 32], "seed": 3, "ground_truth": {"gamma": 1.0}}))
    code, out, _ = run(capsys, "synth", "--config", str(cfg), "--out", str(tmp_path / "ds"))
    assert code == 0
    return tmp_path / "ds"


class TestSynth:
    def test_writes_manifest(self, dataset):
        m = json.loads((dataset / "manifest.json").read_text())
        assert len(m["pairs"]) == 2 and m["ground_truth"]["gamma"] == 1.0

    def test_stdout_is_json(self, tmp_path, capsys):
        code, out, _ = run(capsys, "synth", "--out", str(tmp_path / "d"))
        assert code == 0 and json.loads(out)["pairs"] == 8

    def test_env_seed(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("DARKISP_SEED", "42")
        run(capsys, "synth", "--out", str(tmp_path / "d"))
        seeds = [p["seed"] for p in json.loads((tmp_path / "d" / "manifest.json").read_text())["pairs"]]
        assert seeds == [42 ^ i for i in range(8)]

    def test_empty_source(self, tmp_path, capsys):
        (tmp_path / "src").mkdir()
        code, _, err = run(capsys, "synth", "--source", str(tmp_path / "src"), "--out", str(tmp_path / "d"))
        assert code == 1 and "src" in err


class TestProcess:
    def test_identity_equals_static_binning(self, dataset, tmp_path, capsys):
        code, out, _ = run(capsys, "process", "--input", str(dataset / "raw_0000.draw"),
                           "--checkpoint", "identity", "--output", str(tmp_path / "o.pfm"))
        assert code == 0 and json.loads(out)["mode"] == "float"
        raw = load_bayer(dataset / "raw_0000.draw")
        expected = apply_matrix(compose(LinearParams.from_meta(raw.meta)), raw).channels
        np.testing.assert_allclose(np.einsum("rc,chw->rhw", BINNING, raw.planes), expected, rtol=0, atol=0)
        got = load_rgb(tmp_path / "o.pfm").channels
        np.testing.assert_allclose(got, expected.astype(np.float32), rtol=0, atol=1e-10)

    def test_preview(self, dataset, tmp_path, capsys):
        code, _, _ = run(capsys, "process", "--input", str(dataset / "raw_0001.draw"),
                         "--output", str(tmp_path / "o.ppm"), "--mode", "preview")
        assert code == 0 and (tmp_path / "o.ppm").read_bytes().startswith(b"P6\n32 32\n255\n")

    def test_missing_input(self, tmp_path, capsys):
        code, _, err = run(capsys, "process", "--input", str(tmp_path / "ghost.draw"), "--output", str(tmp_path / "o.pfm"))
        assert code == 1 and "ghost.draw" in err

    def test_bad_mode(self, dataset, tmp_path, capsys):
        code, _, _ = run(capsys, "process", "--input", str(dataset / "raw_0000.draw"),
                         "--output", str(tmp_path / "o"), "--mode", "jpeg")
        assert code == 1

    def test_trained_checkpoint_reports_improvement(self, dataset, tmp_path, capsys):
        ckpt = tmp_path / "c.json"
        code, _, _ = run(capsys, "train", "--data", str(dataset / "manifest.json"), "--out", str(ckpt),
                         "--epochs", "3", "--warmup", "1", "--lr", "0.02")
        assert code == 0
        code, out, err = run(capsys, "process", "--input", str(dataset / "raw_0000.draw"),
                             "--checkpoint", str(ckpt), "--output", str(tmp_path / "o.pfm"))
        assert code == 0 and "improvement" in err
        result = json.loads(out)
        # compare against the library's own evaluation of the same image
        _, samples = load_dataset(dataset / "manifest.json")
        trained = evaluate_model(Checkpoint.load(ckpt).model, samples[:1])
        assert result["psnr"] == pytest.approx(trained["psnr"], abs=1e-4)
        assert result["psnr_improvement"] > 0


class TestTrain:
    def test_flags_override_config_and_log(self, dataset, tmp_path, capsys):
        conf = tmp_path / "train.json"
        conf.write_text(json.dumps({"epochs": 9, "warmup": 1, "lambda": 0.5, "feat_width": 4, "attn_dim": 4}))
        code, out, _ = run(capsys, "train", "--config", str(conf), "--data", str(dataset / "manifest.json"),
                           "--out", str(tmp_path / "c.json"), "--epochs", "2", "--log", str(tmp_path / "l.csv"))
        assert code == 0
        rows = list(csv.reader(io.StringIO(out)))
        assert rows[0][:4] == ["epoch", "l_task", "l_sb", "total"] and len(rows) == 3
        assert (tmp_path / "l.csv").read_text() == out
        assert Checkpoint.load(tmp_path / "c.json").epoch == 2

    def test_invalid_config(self, dataset, tmp_path, capsys):
        conf = tmp_path / "train.json"
        conf.write_text(json.dumps({"learning_rate": 1}))
        code, _, err = run(capsys, "train", "--config", str(conf), "--data", str(dataset / "manifest.json"),
                           "--out", str(tmp_path / "c.json"))
        assert code == 1 and "learning_rate" in err

    def test_bad_manifest(self, tmp_path, capsys):
        (tmp_path / "m.json").write_text("{}")
        code, _, _ = run(capsys, "train", "--data", str(tmp_path / "m.json"), "--out", str(tmp_path / "c.json"))
        assert code == 1

    def test_env_seed_overrides_config(self, dataset, tmp_path, capsys, monkeypatch):
        conf = tmp_path / "train.json"
        conf.write_text(json.dumps({"epochs": 1, "warmup": 0, "seed": 1, "feat_width": 4, "attn_dim": 4}))
        args = ["train", "--config", str(conf), "--data", str(dataset / "manifest.json")]
        run(capsys, *args, "--out", str(tmp_path / "a.json"))
        monkeypatch.setenv("DARKISP_SEED", "1")
        run(capsys, *args, "--out", str(tmp_path / "b.json"))
        monkeypatch.setenv("DARKISP_SEED", "2")
        run(capsys, *args, "--out", str(tmp_path / "c.json"))
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert (tmp_path / "a.json").read_bytes() != (tmp_path / "c.json").read_bytes()


class TestVerify:
    def test_basis(self, capsys):
        code, out, _ = run(capsys, "verify", "--suites", "basis")
        report = json.loads(out)
        assert code == 0 and report["passed"] and list(report["suites"]) == ["basis"]

    def test_lsq(self, capsys):
        code, out, _ = run(capsys, "verify", "--suites", "lsq")
        report = json.loads(out)["suites"]["lsq"]
        assert code == 0 and report["cases"] >= 100

    def test_unknown_suite(self, capsys):
        code, _, err = run(capsys, "verify", "--suites", "speed")
        assert code == 1 and "speed" in err

    def test_failure_exit_code(self, capsys, monkeypatch):
        from darkisp import verify

        def failing():
            res = verify.SuiteResult("basis")
            res.record(False, "forced", 17, np.zeros(2))
            return res

        monkeypatch.setitem(verify.RUNNERS, "basis", failing)
        code, out, err = run(capsys, "verify", "--suites", "basis")
        failure = json.loads(out)["suites"]["basis"]["failures"][0]
        assert code == 2 and failure["seed"] == 17 and len(failure["inputs_digest"]) == 16
        assert "seed=17" in err


class TestInspect:
    def test_identity_params(self, capsys):
        code, out, _ = run(capsys, "inspect", "--checkpoint", "identity", "--what", "params")
        d = json.loads(out)
        assert code == 0
        np.testing.assert_array_equal(d["P"], compose(LinearParams()))
        np.testing.assert_array_equal(d["pooled"], d["P"])

    def test_trained_params(self, dataset, tmp_path, capsys):
        run(capsys, "train", "--data", str(dataset / "manifest.json"), "--out", str(tmp_path / "c.json"),
            "--epochs", "1", "--warmup", "0", "--lr", "0.05")
        code, out, _ = run(capsys, "inspect", "--checkpoint", str(tmp_path / "c.json"))
        d = json.loads(out)
        model = Checkpoint.load(tmp_path / "c.json").model
        np.testing.assert_array_equal(d["P"], model.base_matrix())
        assert np.any(np.array(d["pooled"]) != np.array(d["P"]))

    def test_curves(self, capsys):
        code, out, _ = run(capsys, "inspect", "--what", "curves")
        rows = list(csv.reader(io.StringIO(out)))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        assert code == 0 and body.shape == (256, 1 + 9 + 9)
        f_cols = [header.index(f"f_{k}") for k in range(1, 9)]
        assert np.all(body[-1, f_cols] == 1.0)
        assert np.all(body[:, header.index("g_1")] == 0.0)

    def test_basis_csv(self, capsys):
        code, out, _ = run(capsys, "inspect", "--what", "basis")
        rows = list(csv.reader(io.StringIO(out)))
        assert rows[0] == ["x"] + [f"f_{k}" for k in range(1, 9)] and len(rows) == 257

    def test_unreadable_checkpoint(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text("{not json")
        code, _, err = run(capsys, "inspect", "--checkpoint", str(tmp_path / "bad.json"))
        assert code == 1 and "bad.json" in err

    def test_malformed_checkpoint(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text("{}")
        code, _, _ = run(capsys, "inspect", "--checkpoint", str(tmp_path / "bad.json"))
        assert code == 1


class TestUsage:
    def test_unknown_flag(self, capsys):
        assert run(capsys, "verify", "--fast")[0] == 1

    def test_unknown_command(self, capsys):
        assert run(capsys, "calibrate")[0] == 1

    def test_no_command(self, capsys):
        assert run(capsys)[0] == 1

    def test_bad_env_seed(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("DARKISP_SEED", "abc")
        code, _, err = run(capsys, "synth", "--out", str(tmp_path / "d"))
        assert code == 1 and "DARKISP_SEED" in err

    def test_console_script(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "darkisp.cli", "inspect", "--what", "basis"],
                              capture_output=True, text=True, check=False)
        assert proc.returncode == 0 and proc.stdout.startswith("x,f_1")
        proc = subprocess.run([sys.executable, "-m", "darkisp.cli", "process", "--input", str(tmp_path / "x.draw"),
                               "--output", str(tmp_path / "y.pfm")], capture_output=True, text=True, check=False)
        assert proc.returncode == 1 and "x.draw" in proc.stderr
