from pathlib import Path

import numpy as np
import pytest

from docs_coseg import dataset as ds
from docs_coseg import network, rasters
from docs_coseg.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from docs_coseg.config import RunConfig, load_config


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(out), "--seed", "3", "--images", "40", "--pairs", "100", "--force"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    args = ["train", "--data", str(data_dir), "--out", str(out), "--iterations", "4", "--batch-pairs", "2", "--lr", "1e-3", "--checkpoint-every", "2"]
    assert main(args) == EXIT_OK
    return out


def _tsv(path):
    return [ln.split("\t") for ln in path.read_text().splitlines() if not ln.startswith("#")]


class TestSynth:
    def test_manifest_contents(self, data_dir):
        rows = _tsv(data_dir / "train.tsv")
        assert 0 < len(rows) <= 100
        assert all(r[0] == "train" and r[3] for r in rows)
        assert (data_dir / rows[0][4]).exists()

    def test_rerun_is_byte_identical(self, data_dir, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "d"), "--seed", "3", "--images", "40", "--pairs", "100"]) == EXIT_OK
        for split in ("train", "val", "test"):
            assert (tmp_path / "d" / f"{split}.tsv").read_bytes() == (data_dir / f"{split}.tsv").read_bytes()

    def test_refuses_nonempty_dir(self, data_dir):
        assert main(["synth", "--out", str(data_dir), "--images", "40"]) == EXIT_DATA

    def test_single_image(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "d"), "--images", "1"]) == EXIT_DATA


class TestTrain:
    def test_outputs(self, run_dir):
        for name in ("config.cfg", "loss.tsv", "checkpoint.docs", "loss.png"):
            assert (run_dir / name).exists(), name
        rows = _tsv(run_dir / "loss.tsv")
        assert rows[0] == ["iteration", "loss", "val_jaccard"]
        assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]

    def test_echoed_config_reproduces_run(self, run_dir):
        cfg = load_config(run_dir / "config.cfg")
        assert cfg.iterations == 4 and cfg.batch_pairs == 2 and cfg.lr == 1e-3
        assert load_config(None, {}).lr == RunConfig().lr

    def test_concat_skips_correlation(self, data_dir, tmp_path):
        from docs_coseg import correlation

        before = correlation.CALL_COUNT
        args = ["train", "--data", str(data_dir), "--out", str(tmp_path), "--iterations", "1", "--batch-pairs", "1", "--fusion", "concat"]
        assert main(args) == EXIT_OK
        assert correlation.CALL_COUNT == before
        _, cfg = network.load_checkpoint(tmp_path / "checkpoint.docs")
        assert cfg.fusion == "concat"

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_keeps_checkpoint(self, data_dir, tmp_path):
        args = ["train", "--data", str(data_dir), "--out", str(tmp_path), "--iterations", "6", "--batch-pairs", "1", "--lr", "1e30", "--checkpoint-every", "1"]
        assert main(args) == EXIT_NUMERIC
        network.load_checkpoint(tmp_path / "checkpoint.docs")
        assert (tmp_path / "loss.tsv").exists()

    def test_pretraining_from_config(self, data_dir, tmp_path):
        cfg = tmp_path / "pre.cfg"
        cfg.write_text("pretrain_iterations = 2\npretrain_batch = 4\nlr = 0.001\n")
        args = ["train", "--data", str(data_dir), "--out", str(tmp_path / "o"), "--config", str(cfg), "--iterations", "1", "--batch-pairs", "1"]
        assert main(args) == EXIT_OK
        assert load_config(tmp_path / "o" / "config.cfg").pretrain_iterations == 2
        params, _ = network.load_checkpoint(tmp_path / "o" / "checkpoint.docs")
        assert not any(name.startswith("pretrain.") for name in params)

    def test_bad_config(self, data_dir, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("no_such_key = 3\n")
        assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "o"), "--config", str(cfg)]) == EXIT_USAGE

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == EXIT_DATA


class TestInfer:
    def test_identical_images_give_identical_masks(self, run_dir, data_dir, tmp_path):
        img = sorted((data_dir / "images").glob("*.png"))[0]
        assert main(["infer", "--ckpt", str(run_dir / "checkpoint.docs"), str(img), str(img), "--out", str(tmp_path), "--dump-prob"]) == EXIT_OK
        assert (tmp_path / "maskA.png").read_bytes() == (tmp_path / "maskB.png").read_bytes()
        prob = rasters.read_pmap(tmp_path / "probA.pmap")
        assert prob.shape == (64, 64)
        assert (tmp_path / "probA.png").exists()

    def test_output_dims_follow_input(self, run_dir, tmp_path):
        rng = np.random.default_rng(0)
        for name, size in (("a.png", (48, 80)), ("b.png", (64, 64))):
            ds.save_png(tmp_path / name, rng.integers(0, 256, (*size, 3), dtype=np.uint8))
        out = tmp_path / "out"
        assert main(["infer", "--ckpt", str(run_dir / "checkpoint.docs"), str(tmp_path / "a.png"), str(tmp_path / "b.png"), "--out", str(out), "--dump-prob"]) == EXIT_OK
        assert ds.load_mask(out / "maskA.png").shape == (48, 80)
        assert rasters.read_pmap(out / "probA.pmap").shape == (48, 80)

    def test_bad_checkpoint(self, tmp_path):
        bad = tmp_path / "bad.docs"
        bad.write_bytes(b"DOCS" + (9).to_bytes(4, "little") + bytes(8))
        assert main(["infer", "--ckpt", str(bad), "x.png", "y.png", "--out", str(tmp_path)]) == EXIT_DATA

    def test_split_mode_then_eval(self, run_dir, data_dir, tmp_path):
        pred = tmp_path / "pred"
        assert main(["infer", "--ckpt", str(run_dir / "checkpoint.docs"), "--data", str(data_dir), "--split", "val", "--out", str(pred)]) == EXIT_OK
        n = len(_tsv(data_dir / "val.tsv"))
        assert len(list(pred.glob("*_A.png"))) == n
        assert main(["eval", "--pred", str(pred), "--data", str(data_dir), "--split", "val", "--out", str(tmp_path / "rep")]) == EXIT_OK
        assert len(_tsv(tmp_path / "rep" / "report.tsv")) == 2 * n
        assert "overall" in (tmp_path / "rep" / "report.txt").read_text()
        assert (tmp_path / "rep" / "report.png").exists()

    def test_eval_missing_prediction(self, data_dir, tmp_path):
        assert main(["eval", "--pred", str(tmp_path), "--data", str(data_dir), "--split", "val"]) == EXIT_DATA


class TestGroup:
    @pytest.fixture()
    def group_dir(self, tmp_path):
        d = tmp_path / "imgs"
        d.mkdir()
        for gid, image, _, _ in ds.make_group(1, 3, common_class=2):
            ds.save_png(d / f"{gid}.png", np.ascontiguousarray(ds.to_uint8(image).transpose(1, 2, 0)))
        return d

    def test_all_on_three_images(self, run_dir, group_dir, tmp_path):
        out = tmp_path / "out"
        assert main(["group", "--ckpt", str(run_dir / "checkpoint.docs"), "--dir", str(group_dir), "--out", str(out)]) == EXIT_OK
        assert len((out / "pairs.log").read_text().splitlines()) == 6
        assert len(list(out.glob("*.png"))) == 3

    def test_sigma_one_is_background(self, run_dir, group_dir, tmp_path):
        out = tmp_path / "out"
        assert main(["group", "--ckpt", str(run_dir / "checkpoint.docs"), "--dir", str(group_dir), "--out", str(out), "--sigma", "1.0"]) == EXIT_OK
        assert all(not ds.load_mask(p).any() for p in out.glob("*.png"))

    def test_k_sweep_with_ground_truth(self, run_dir, group_dir, tmp_path):
        gt = tmp_path / "gt"
        gt.mkdir()
        for p in group_dir.glob("*.png"):
            ds.save_mask(gt / p.name, np.zeros((64, 64), np.uint8))
        out = tmp_path / "out"
        argv = ["group", "--ckpt", str(run_dir / "checkpoint.docs"), "--dir", str(group_dir), "--out", str(out), "--k", "1,all", "--gt", str(gt)]
        assert main(argv) == EXIT_OK
        rows = _tsv(out / "k_sweep.tsv")
        assert [r[0] for r in rows] == ["k", "1", "all"]
        assert (out / "k_sweep.png").exists()
        assert len((out / "k_1" / "pairs.log").read_text().splitlines()) == 3

    def test_too_few_images(self, run_dir, tmp_path):
        assert main(["group", "--ckpt", str(run_dir / "checkpoint.docs"), "--dir", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_DATA

    def test_k_too_large(self, run_dir, group_dir, tmp_path):
        assert main(["group", "--ckpt", str(run_dir / "checkpoint.docs"), "--dir", str(group_dir), "--out", str(tmp_path), "--k", "5"]) == EXIT_DATA


class TestGradcheckAndBench:
    @pytest.mark.parametrize("op", ["conv", "deconv", "corr"])
    def test_ops_pass(self, op, capsys):
        assert main(["gradcheck", "--op", op]) == EXIT_OK
        assert "pass" in capsys.readouterr().out

    def test_unknown_op(self):
        with pytest.raises(SystemExit) as exc:
            main(["gradcheck", "--op", "pool"])
        assert exc.value.code == EXIT_USAGE

    def test_bench_small(self, tmp_path, capsys):
        out = tmp_path / "bench.tsv"
        assert main(["bench", "--size", "4", "8", "--channels", "8", "--runs", "5", "--out", str(out)]) == EXIT_OK
        rows = _tsv(out)
        assert rows[0] == ["size", "channels", "D", "impl", "median_s"]
        assert {(r[0], r[3]) for r in rows[1:]} == {("4", "naive"), ("4", "opt"), ("8", "naive"), ("8", "opt")}


def test_missing_command_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE


class TestGolden:
    GOLDEN = Path(__file__).resolve().parent / "data" / "golden"

    def test_committed_checkpoint_reproduces_masks(self, tmp_path):
        g = self.GOLDEN
        argv = ["infer", "--ckpt", str(g / "tiny.docs"), str(g / "a.png"), str(g / "b.png"), "--out", str(tmp_path), "--dump-prob"]
        assert main(argv) == EXIT_OK
        for side in "AB":
            assert (tmp_path / f"mask{side}.png").read_bytes() == (g / "expected" / f"mask{side}.png").read_bytes()
            np.testing.assert_allclose(
                rasters.read_pmap(tmp_path / f"prob{side}.pmap"), rasters.read_pmap(g / "expected" / f"prob{side}.pmap"), atol=1e-6
            )
