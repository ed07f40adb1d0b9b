"""CLI contract: delegation, idempotent artifacts, exit codes."""
import hashlib
import json

import numpy as np
import pytest

from drawseg import cli
from drawseg import tensor as T
from drawseg.netpbm import read_pgm


def dir_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["gen-data", "--n", "10", "--size", "32", "--seed", "0",
                     "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("cli_run") / "r1"
    code = cli.main([
        "train", "--data", str(data_dir), "--out", str(out),
        "--variant", "unet-full", "--loss", "focal",
        "--epochs", "2", "--unfreeze-epoch", "0", "--depth", "3",
        "--base-width", "4", "--batch-size", "4", "--seed", "0"])
    assert code == 0
    return out


class TestGenData:
    def test_layout_and_idempotency(self, data_dir, tmp_path, capsys):
        assert (data_dir / "manifest.txt").exists()
        twin = tmp_path / "twin"
        assert cli.main(["gen-data", "--n", "10", "--size", "32", "--seed", "0",
                         "--out", str(twin)]) == 0
        assert dir_digest(data_dir) == dir_digest(twin)

    def test_prints_resolved_config(self, tmp_path, capsys):
        cli.main(["gen-data", "--n", "2", "--size", "16", "--seed", "3",
                  "--out", str(tmp_path / "d")])
        head = capsys.readouterr().out.splitlines()[0]
        assert head.startswith("[gen-data]")
        assert json.loads(head.split("] ", 1)[1])["seed"] == 3

    def test_segseed_env_default_and_flag_wins(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("SEGSEED", "7")
        cli.main(["gen-data", "--n", "1", "--size", "16", "--out", str(tmp_path / "a")])
        head = capsys.readouterr().out.splitlines()[0]
        assert json.loads(head.split("] ", 1)[1])["seed"] == 7
        cli.main(["gen-data", "--n", "1", "--size", "16", "--seed", "9",
                  "--out", str(tmp_path / "b")])
        head = capsys.readouterr().out.splitlines()[0]
        assert json.loads(head.split("] ", 1)[1])["seed"] == 9


class TestTrainEvalPredict:
    def test_train_writes_epoch_rows(self, run_dir):
        lines = (run_dir / "log.csv").read_text().strip().splitlines()
        assert len(lines) == 3  # header + 2 epochs

    def test_eval_writes_metrics(self, data_dir, run_dir, tmp_path):
        out = tmp_path / "eval"
        code = cli.main([
            "eval", "--ckpt", str(run_dir / "checkpoints" / "final.segm"),
            "--data", str(data_dir), "--ids", "splits/fold0.txt",
            "--out", str(out)])
        assert code == 0
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        assert len(lines) == 2  # header + one summary row
        assert (out / "confusion.csv").exists()

    def test_predict_writes_masks_and_overlays(self, data_dir, run_dir, tmp_path):
        out = tmp_path / "pred"
        code = cli.main([
            "predict", "--ckpt", str(run_dir / "checkpoints" / "final.segm"),
            "--data", str(data_dir), "--ids", "splits/fold0.txt", "--out", str(out)])
        assert code == 0
        preds = sorted(out.glob("*_pred.pgm"))
        overlays = sorted(out.glob("*_overlay.ppm"))
        assert len(preds) == 2 and len(overlays) == 2
        mask, maxval = read_pgm(preds[0])
        assert maxval == 5 and mask.shape == (32, 32)
        raw = overlays[0].read_bytes()
        assert raw.startswith(b"P6\n32 32\n255\n")
        assert len(raw) == len(b"P6\n32 32\n255\n") + 32 * 32 * 3

    def test_train_rerun_reproduces_artifacts(self, data_dir, run_dir, tmp_path):
        again = tmp_path / "r2"
        cli.main([
            "train", "--data", str(data_dir), "--out", str(again),
            "--variant", "unet-full", "--loss", "focal",
            "--epochs", "2", "--unfreeze-epoch", "0", "--depth", "3",
            "--base-width", "4", "--batch-size", "4", "--seed", "0"])
        assert (again / "log.csv").read_bytes() == (run_dir / "log.csv").read_bytes()
        assert ((again / "checkpoints" / "final.segm").read_bytes()
                == (run_dir / "checkpoints" / "final.segm").read_bytes())


class TestExitCodes:
    def test_missing_dataset_is_2(self, tmp_path):
        assert cli.main(["train", "--data", str(tmp_path / "nope"),
                         "--out", str(tmp_path / "r"), "--epochs", "1"]) == 2

    def test_missing_checkpoint_is_2(self, data_dir, tmp_path):
        assert cli.main(["eval", "--ckpt", str(tmp_path / "nope.segm"),
                         "--data", str(data_dir)]) == 2

    def test_unknown_flag_is_2(self):
        assert cli.main(["gen-data", "--n", "1", "--wat", "x", "--out", "d"]) == 2

    def test_unknown_variant_is_2(self, data_dir, tmp_path):
        assert cli.main(["train", "--data", str(data_dir), "--out", str(tmp_path / "r"),
                         "--variant", "segnet-base", "--epochs", "1"]) == 2

    def test_numerical_failure_is_3(self, data_dir, tmp_path, monkeypatch):
        from drawseg import training as TR
        real = TR.segmentation_loss

        def poisoned(spec, logits, targets):
            loss = real(spec, logits, targets)
            loss.data = np.asarray(np.nan, dtype=loss.data.dtype)
            return loss

        monkeypatch.setattr(TR, "segmentation_loss", poisoned)
        code = cli.main(["train", "--data", str(data_dir), "--out", str(tmp_path / "r"),
                        "--epochs", "1", "--unfreeze-epoch", "0", "--depth", "3",
                         "--base-width", "4", "--no-validation"])
        assert code == 3

    def test_gradcheck_corrupted_rule_is_1(self):
        T.set_sigmoid_grad_flip(True)
        try:
            assert cli.main(["gradcheck", "--scope", "primitive"]) == 1
        finally:
            T.set_sigmoid_grad_flip(False)


class TestGradcheckCommand:
    @pytest.mark.parametrize("scope", ["cbam", "skip"])
    def test_scopes_pass(self, scope):
        assert cli.main(["gradcheck", "--scope", scope]) == 0

    def test_unknown_scope_rejected(self):
        assert cli.main(["gradcheck", "--scope", "everything"]) == 2
