import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from dualprompt import init_prompts, load_checkpoint, make_catalog
from dualprompt.cli import main
from dualprompt.config import config_digest
from dualprompt.data import Dataset, ImageRecord, load_dataset, read_feature_file, save_dataset
from dualprompt.prompts import PromptConfig


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    common = ["--classes", 6, "--dim", 8, "--grid", "3x3", "--labels-max", 2]
    assert run("synth", "--images", 60, *common, "--out", d / "train") == 0
    assert run("synth", "--images", 30, *common, "--seed", 1, "--id-prefix", "te", "--out", d / "test") == 0
    return d


def _train(work, name, *extra):
    ckpt = work / f"{name}.dcpt"
    rc = run("train", "--data", work / "train" / "manifest.json", "--epochs", 2, "--out-checkpoint", ckpt,
             "--history", work / f"{name}.csv", "--strict", *extra)
    return rc, ckpt


class TestSynth:
    def test_default_size(self, tmp_path):
        assert run("synth", "--out", tmp_path / "d") == 0
        m = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert len(m["classes"]) == 20 and len(m["images"]) == 2000
        fm = read_feature_file(tmp_path / "d" / m["images"][0]["feature_file"])
        assert fm.shape[:2] == (8, 8)
        assert len(list((tmp_path / "d").rglob("img*.dcfm"))) == 2000

    def test_zero_images(self, tmp_path):
        assert run("synth", "--images", 0, "--out", tmp_path / "d") == 2

    def test_same_seed_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run("synth", "--images", 5, "--classes", 4, "--dim", 4, "--grid", "2x2",
                       "--out", tmp_path / name) == 0
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_bad_grid(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            run("synth", "--grid", "8by8", "--out", tmp_path)
        assert e.value.code == 2


class TestMaskSplit:
    def test_keep_fraction_count(self, tmp_path):
        assert run("synth", "--images", 2000, "--dim", 4, "--grid", "2x2", "--out", tmp_path / "d") == 0
        assert run("mask", "--keep", 0.1, "--in", tmp_path / "d" / "manifest.json",
                   "--out", tmp_path / "m" / "manifest.json") == 0
        ds = load_dataset(tmp_path / "m" / "manifest.json")
        assert np.count_nonzero(ds.labels) == 4000

    def test_keep_one_is_identity(self, work, tmp_path):
        src = work / "train" / "manifest.json"
        assert run("mask", "--keep", 1.0, "--in", src, "--out", tmp_path / "m.json") == 0
        np.testing.assert_array_equal(load_dataset(tmp_path / "m.json").labels, load_dataset(src).labels)

    @pytest.mark.parametrize("keep", [0.0, 1.5])
    def test_keep_out_of_range(self, work, tmp_path, keep):
        assert run("mask", "--keep", keep, "--in", work / "train" / "manifest.json", "--out", tmp_path / "m.json") == 2

    def test_inputs_not_mutated(self, work, tmp_path):
        src = work / "train" / "manifest.json"
        before = src.read_bytes()
        run("mask", "--keep", 0.5, "--in", src, "--out", tmp_path / "m.json")
        run("split", "--unseen", "4,5", "--in", src, "--out", tmp_path / "s.json")
        assert src.read_bytes() == before

    def test_split_counts(self, tmp_path):
        assert run("synth", "--images", 3, "--dim", 4, "--grid", "2x2", "--out", tmp_path / "d") == 0
        assert run("split", "--unseen", "15,16,17,18,19", "--in", tmp_path / "d" / "manifest.json",
                   "--out", tmp_path / "s.json", "--labels-out", tmp_path / "r.json") == 0
        s = json.loads((tmp_path / "s.json").read_text())
        assert len(s["seen"]) == 15 and "config_digest" in s
        assert not load_dataset(tmp_path / "r.json").labels[:, 15:].any()

    def test_split_out_of_range(self, work, tmp_path):
        assert run("split", "--unseen", "9", "--in", work / "train" / "manifest.json", "--out", tmp_path / "s") == 2


class TestTrainEval:
    def test_train_writes_checkpoint_and_history(self, work):
        rc, ckpt = _train(work, "cs")
        assert rc == 0
        bank, meta = load_checkpoint(ckpt)
        assert meta["config_digest"] == config_digest(meta["config"])
        rows = list(csv.DictReader(open(work / "cs.csv")))
        assert len(rows) == 2 and rows[0]["config_digest"] == meta["config_digest"]

    def test_zero_lr_keeps_init(self, work, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": {"lr0": 0.0, "seed": 4, "prompt": {"n_ctx_pos": 3, "n_ctx_neg": 2}}}))
        rc, ckpt = _train(work, "zero", "--config", cfg)
        assert rc == 0
        bank, _ = load_checkpoint(ckpt)
        assert bank.equals(init_prompts(PromptConfig(3, 2, 8), 6, 4))

    def test_missing_data(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope.json", "--out-checkpoint", tmp_path / "c") == 2

    def test_unknown_config_key(self, work, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
        assert _train(work, "bad", "--config", cfg)[0] == 2

    def test_abort_writes_diagnostic(self, work, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": {"lr0": 1e300}}))
        rc, ckpt = _train(work, "boom", "--config", cfg)
        assert rc == 3
        diag = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert diag["stage"] == "sgd_update" and diag["epoch"] == 1
        assert load_checkpoint(diag["last_good_checkpoint"])[0].pos.shape[0] == 6

    def test_strict_runs_byte_identical(self, work, tmp_path):
        out = []
        for name in ("r1", "r2"):
            rc, ckpt = _train(work, name)
            assert rc == 0
            rep = tmp_path / f"{name}.json"
            assert run("eval", "--checkpoint", ckpt, "--data", work / "test" / "manifest.json",
                       "--report", rep) == 0
            out.append((ckpt.read_bytes(), (work / f"{name}.csv").read_bytes(), rep.read_bytes()))
        assert out[0] == out[1]

    def test_eval_report_keys_and_repeatability(self, work, tmp_path):
        _, ckpt = _train(work, "ev")
        for name in ("a", "b"):
            assert run("eval", "--checkpoint", ckpt, "--data", work / "test" / "manifest.json", "--topk", "3",
                       "--report", tmp_path / f"{name}.json") == 0
        rep = json.loads((tmp_path / "a.json").read_text())
        assert {"P@3", "R@3", "F1@3", "mAP"} <= set(rep) and "P@5" not in rep
        assert rep["meta"]["config_digest"]
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert (tmp_path / "a.csv").read_text().startswith("config_digest,mode,mAP")

    def test_zsl_needs_shared(self, work, tmp_path):
        _, ckpt = _train(work, "cs2")
        run("split", "--unseen", "4,5", "--in", work / "train" / "manifest.json", "--out", tmp_path / "s.json")
        args = ["eval", "--checkpoint", ckpt, "--data", work / "test" / "manifest.json", "--mode", "zsl",
                "--split", tmp_path / "s.json", "--report", tmp_path / "z.json"]
        assert run(*args) == 2
        assert run(*args, "--allow-mode-change") == 0

    def test_zsl_shared_roundtrip(self, work, tmp_path):
        run("split", "--unseen", "4,5", "--in", work / "train" / "manifest.json", "--out", tmp_path / "s.json")
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": {"prompt": {"mode": "shared"}}}))
        rc, ckpt = _train(work, "sh", "--config", cfg, "--split", tmp_path / "s.json")
        assert rc == 0
        # split is recorded in the checkpoint, so --split may be omitted
        assert run("eval", "--checkpoint", ckpt, "--data", work / "test" / "manifest.json", "--mode", "zsl",
                   "--report", tmp_path / "z.json") == 0
        assert json.loads((tmp_path / "z.json").read_text())["classes"] == ["class04", "class05"]

    def test_default_output_dir_from_env(self, work, tmp_path, monkeypatch):
        monkeypatch.setenv("DUALPROMPT_OUT", str(tmp_path))
        assert run("train", "--data", work / "train" / "manifest.json", "--epochs", 1) == 0
        assert (tmp_path / "prompts.dcpt").exists() and (tmp_path / "history.csv").exists()


class TestAttmap:
    def test_uniform_image(self, tmp_path, work):
        _, ckpt = _train(work, "am")
        cat = make_catalog(6, 8, seed=0)
        fm = np.broadcast_to(np.arange(1, 9, dtype=np.float32), (3, 3, 8)).copy()
        ds = Dataset(cat, [ImageRecord("flat", fm)], np.ones((1, 6), dtype=np.int8))
        save_dataset(ds, tmp_path / "u" / "manifest.json")
        assert run("attmap", "--checkpoint", ckpt, "--data", tmp_path / "u" / "manifest.json",
                   "--image-id", "flat", "--class", "class02", "--out", tmp_path / "m") == 0
        grid = np.loadtxt(tmp_path / "m.csv", delimiter=",")
        np.testing.assert_allclose(grid, 1 / 9, atol=1e-15)
        raw = (tmp_path / "m.pgm").read_bytes()
        assert raw.startswith(b"P5\n3 3\n255\n") and set(raw[-9:]) == {255}

    def test_weights_sum_to_one(self, tmp_path, work):
        _, ckpt = _train(work, "am2")
        assert run("attmap", "--checkpoint", ckpt, "--data", work / "test" / "manifest.json",
                   "--image-id", "te00003", "--class", "1", "--out", tmp_path / "m") == 0
        assert abs(np.loadtxt(tmp_path / "m.csv", delimiter=",").sum() - 1) <= 1e-9

    def test_unknown_image(self, tmp_path, work):
        _, ckpt = _train(work, "am3")
        assert run("attmap", "--checkpoint", ckpt, "--data", work / "test" / "manifest.json",
                   "--image-id", "nope", "--class", "1", "--out", tmp_path / "m") == 2


class TestSweep:
    def _sweep(self, work, out, values):
        return run("sweep", "--data", work / "train" / "manifest.json", "--test-data", work / "test" / "manifest.json",
                   "--keep-list", values, "--epochs", 1, "--topk", "3", "--out", out)

    def test_rows_and_trend(self, work, tmp_path):
        values = ",".join(f"0.{i}" for i in range(1, 10))
        assert self._sweep(work, tmp_path / "s.csv", values) == 0
        rows = list(csv.DictReader(open(tmp_path / "s.csv")))
        assert len(rows) == 9
        assert [float(r["value"]) for r in rows] == [i / 10 for i in range(1, 10)]
        assert len({r["config_digest"] for r in rows}) == 9
        assert {r["trend"] for r in rows} <= {"nondecreasing", "not_monotone"}

    def test_resumable(self, work, tmp_path, capsys):
        out = tmp_path / "s.csv"
        assert self._sweep(work, out, "0.2,0.5") == 0
        first = out.read_text()
        capsys.readouterr()
        assert self._sweep(work, out, "0.2,0.5") == 0
        assert "repeat 0: mAP" not in capsys.readouterr().out
        assert out.read_text() == first
        assert self._sweep(work, out, "0.2,0.5,0.8") == 0
        assert len(list(csv.DictReader(open(out)))) == 3

    def test_nctx(self, work, tmp_path):
        assert run("sweep", "--data", work / "train" / "manifest.json", "--test-data", work / "test" / "manifest.json",
                   "--nctx-list", "2,4", "--epochs", 1, "--out", tmp_path / "n.csv") == 0
        assert [r["value"] for r in csv.DictReader(open(tmp_path / "n.csv"))] == ["2", "4"]


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "dualprompt.cli", "synth", "--images", "2", "--classes", "2",
                        "--dim", "3", "--grid", "2x2", "--labels-max", "2", "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("synth: 2 images")
