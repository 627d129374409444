"""End-to-end coverage of the command-line verbs and the run-config schema."""

import json
import logging
import shutil

import numpy as np
import pytest

from predseg import bench, models, synthetic
from predseg import io as pio
from predseg.cli import CliError, load_run_config, main
from predseg.mrf import ConnectivityMap


# ---------------------------------------------------------------- fixtures

@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    directory = tmp_path_factory.mktemp("corpus")
    synthetic.write_two_region_corpus(directory, 6, shape=(32, 32), seed=3)
    return directory


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, corpus):
    """One tiny pixel-model training run shared by the read-only tests."""
    out = tmp_path_factory.mktemp("run")
    config = write_config(out / "cfg.json", corpus, out / "train")
    assert main(["train", "--config", str(config)]) == 0
    return out / "train"


@pytest.fixture(scope="module")
def checkpoint(run_dir):
    return run_dir / "checkpoints" / "final"


def write_config(path, corpus, out, **overrides):
    doc = {
        "schema_version": 1,
        "architecture": "pixel",
        "corpus": str(corpus),
        "out": str(out),
        "loss": "factor",
        "epochs": 1,
        "batch_size": 2,
        "crop": [32, 32],
        "seed": 0,
        "max_steps": 3,
    }
    doc.update(overrides)
    path.write_text(json.dumps(doc))
    return path


# ---------------------------------------------------------------- config schema

class TestRunConfig:
    def test_minimal_config_fills_defaults(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({
            "schema_version": 1, "architecture": "linear",
            "corpus": "data", "out": "runs/x",
        }))
        cfg = load_run_config(path)
        assert cfg.model.architecture == "linear"
        assert cfg.model.neighborhood == 4
        assert cfg.settings.epochs == 10
        assert cfg.settings.lr == 0.001
        assert str(cfg.corpus) == "data"

    def test_full_config_round_trip(self, tmp_path, corpus):
        path = write_config(
            tmp_path / "cfg.json", corpus, tmp_path / "out",
            neighborhood=8, alpha=0.1, loss="position", head_layers=[0],
            optimizer={"lr": 0.01, "momentum": 0.5, "weight_decay": 0.0},
            negatives=4, repetitions=2, time_budget=60.0,
        )
        cfg = load_run_config(path)
        assert cfg.model.neighborhood == 8
        assert cfg.model.alpha == 0.1
        assert cfg.model.loss == "position"
        assert cfg.settings.lr == 0.01
        assert cfg.settings.momentum == 0.5
        assert cfg.settings.repetitions == 2
        assert cfg.settings.time_budget == 60.0

    def test_unknown_top_level_key_rejected(self, tmp_path, corpus):
        path = write_config(tmp_path / "cfg.json", corpus, tmp_path / "o", learning_rate=0.1)
        with pytest.raises(CliError, match="unknown keys.*learning_rate"):
            load_run_config(path)

    def test_unknown_optimizer_key_rejected(self, tmp_path, corpus):
        path = write_config(tmp_path / "cfg.json", corpus, tmp_path / "o",
                            optimizer={"lr": 0.01, "decay": 0.9})
        with pytest.raises(CliError, match="unknown optimizer keys.*decay"):
            load_run_config(path)

    def test_schema_version_required(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"architecture": "pixel", "corpus": "d", "out": "o"}))
        with pytest.raises(CliError, match="schema_version"):
            load_run_config(path)

    def test_wrong_schema_version(self, tmp_path, corpus):
        path = write_config(tmp_path / "cfg.json", corpus, tmp_path / "o", schema_version=2)
        with pytest.raises(CliError, match="schema_version must be 1"):
            load_run_config(path)

    @pytest.mark.parametrize("missing", ["architecture", "corpus", "out"])
    def test_required_keys(self, tmp_path, missing):
        doc = {"schema_version": 1, "architecture": "pixel", "corpus": "d", "out": "o"}
        del doc[missing]
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(CliError, match=missing):
            load_run_config(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{not json")
        with pytest.raises(CliError, match="not readable JSON"):
            load_run_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CliError, match="config file not found"):
            load_run_config(tmp_path / "nope.json")

    def test_bad_model_value_names_the_config(self, tmp_path, corpus):
        path = write_config(tmp_path / "cfg.json", corpus, tmp_path / "o", neighborhood=5)
        with pytest.raises(CliError, match=r"cfg\.json.*neighborhood"):
            load_run_config(path)

    def test_bad_crop_shape(self, tmp_path, corpus):
        path = write_config(tmp_path / "cfg.json", corpus, tmp_path / "o", crop=[32])
        with pytest.raises(CliError, match="crop"):
            load_run_config(path)

    def test_cli_errors_carry_exit_code(self):
        assert CliError("x").code == 2
        assert CliError("x", code=3).code == 3


# ---------------------------------------------------------------- train

class TestTrain:
    def test_missing_corpus_exits_2_and_names_path(self, tmp_path, capsys):
        config = write_config(tmp_path / "cfg.json", tmp_path / "no-such-corpus", tmp_path / "o")
        assert main(["train", "--config", str(config)]) == 2
        err = capsys.readouterr().err
        assert "no-such-corpus" in err

    def test_outputs_exist_and_manifest_echoes_config(self, run_dir):
        assert (run_dir / "checkpoints" / "final" / "manifest.json").is_file()
        assert (run_dir / "metrics.csv").is_file()
        assert (run_dir / "timing.csv").is_file()
        manifest = json.loads((run_dir / "run.json").read_text())
        assert manifest["config"]["architecture"] == "pixel"
        assert manifest["settings"]["seed"] == 0
        assert manifest["settings"]["max_steps"] == 3
        assert manifest["corpus"]["files"] == 6
        assert manifest["result"]["steps"] == 3

    def test_rerun_same_seed_identical_metrics(self, tmp_path, corpus):
        config = write_config(tmp_path / "cfg.json", corpus, tmp_path / "a")
        assert main(["train", "--config", str(config)]) == 0
        assert main(["train", "--config", str(config), "--out", str(tmp_path / "b")]) == 0
        first = (tmp_path / "a" / "metrics.csv").read_bytes()
        second = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert first == second

    def test_seed_flag_overrides_config(self, tmp_path, corpus):
        config = write_config(tmp_path / "cfg.json", corpus, tmp_path / "o")
        assert main(["train", "--config", str(config), "--seed", "7",
                     "--threads", "1"]) == 0
        manifest = json.loads((tmp_path / "o" / "run.json").read_text())
        assert manifest["settings"]["seed"] == 7

    def test_invalid_config_exits_2(self, tmp_path, corpus, capsys):
        config = write_config(tmp_path / "cfg.json", corpus, tmp_path / "o", typo_key=1)
        assert main(["train", "--config", str(config)]) == 2
        assert "typo_key" in capsys.readouterr().err


# ---------------------------------------------------------------- connectivity

class TestConnectivity:
    def test_writes_loadable_map_per_image(self, checkpoint, corpus, tmp_path):
        assert main(["connectivity", str(checkpoint), str(corpus),
                     "--out", str(tmp_path / "conn")]) == 0
        dirs = sorted(p.name for p in (tmp_path / "conn").iterdir())
        assert dirs == [f"tworegion{i:04d}.head0" for i in range(6)]
        cm = ConnectivityMap.load(tmp_path / "conn" / "tworegion0000.head0")
        assert (cm.height, cm.width) == (32, 32)
        assert len(cm.offsets) == 2  # 4-neighborhood: down and right

    def test_single_image_input(self, checkpoint, corpus, tmp_path):
        image = sorted(corpus.iterdir())[0]
        assert main(["connectivity", str(checkpoint), str(image),
                     "--out", str(tmp_path / "conn")]) == 0
        assert (tmp_path / "conn" / f"{image.stem}.head0" / "manifest.json").is_file()

    def test_missing_checkpoint_exits_2(self, corpus, tmp_path, capsys):
        missing = tmp_path / "nope"
        assert main(["connectivity", str(missing), str(corpus),
                     "--out", str(tmp_path / "o")]) == 2
        assert "nope" in capsys.readouterr().err

    def test_missing_images_exit_2(self, checkpoint, tmp_path, capsys):
        assert main(["connectivity", str(checkpoint), str(tmp_path / "ghost.png"),
                     "--out", str(tmp_path / "o")]) == 2
        assert "ghost.png" in capsys.readouterr().err


# ---------------------------------------------------------------- contours

class TestContours:
    def test_naming_contract_single_image(self, checkpoint, corpus, tmp_path):
        image = sorted(corpus.iterdir())[0]
        assert main(["contours", str(checkpoint), str(image),
                     "--out", str(tmp_path / "c"), "--eigenvectors", "2"]) == 0
        names = sorted(p.name for p in (tmp_path / "c").iterdir())
        assert names == [f"{image.stem}.head0.png", f"{image.stem}.head0.pstf"]
        values = pio.read_tensor(tmp_path / "c" / f"{image.stem}.head0.pstf")
        assert values.shape == (32, 32)
        assert values.min() >= 0.0 and values.max() <= 1.0

    def test_directory_times_heads_outputs(self, corpus, tmp_path):
        # a small two-head trunk: 3 images x 2 heads x 2 formats
        config = models.ModelConfig(
            architecture="predseg1",
            layers=(
                {"out_channels": 2, "kernel": 3, "stride": 2, "relu": False},
                {"out_channels": 2, "kernel": 3, "stride": 1, "relu": True},
            ),
            head_layers=(0, 1),
        )
        model = models.build_model(config, seed=0)
        ckpt = tmp_path / "ckpt"
        models.save_checkpoint(model, ckpt)
        few = tmp_path / "few"
        few.mkdir()
        for p in sorted(corpus.iterdir())[:3]:
            (few / p.name).write_bytes(p.read_bytes())
        assert main(["contours", str(ckpt), str(few),
                     "--out", str(tmp_path / "c"), "--eigenvectors", "2"]) == 0
        names = sorted(p.name for p in (tmp_path / "c").iterdir())
        assert len(names) == 3 * 2 * 2
        for stem in ("tworegion0000", "tworegion0001", "tworegion0002"):
            for head in (0, 1):
                assert f"{stem}.head{head}.png" in names
                assert f"{stem}.head{head}.pstf" in names

    def test_png_and_tensor_agree(self, checkpoint, corpus, tmp_path):
        image = sorted(corpus.iterdir())[0]
        main(["contours", str(checkpoint), str(image),
              "--out", str(tmp_path / "c"), "--eigenvectors", "2"])
        png = pio.read_contour_png(tmp_path / "c" / f"{image.stem}.head0.png")
        pstf = pio.read_tensor(tmp_path / "c" / f"{image.stem}.head0.pstf")
        assert np.abs(png - pstf).max() < 1.0 / 65535.0  # quantization only

    def test_corrupted_checkpoint_exits_3(self, checkpoint, corpus, tmp_path, capsys):
        broken = tmp_path / "broken"
        shutil.copytree(checkpoint, broken)
        tensors = sorted(broken.rglob("*.pstf"))
        tensors[0].write_bytes(b"garbage")
        assert main(["contours", str(broken), str(corpus),
                     "--out", str(tmp_path / "c")]) == 3
        assert "checkpoint" in capsys.readouterr().err


# ---------------------------------------------------------------- eval

def boundary_fixture(tmp_path, n_images=3):
    """GT + a matching perfect-prediction contour dir; returns (contours, gt)."""
    gt = bench.GroundTruth()
    contour_dir = tmp_path / "contours"
    contour_dir.mkdir()
    rng = np.random.default_rng(5)
    for i in range(n_images):
        boundary = np.zeros((32, 32), dtype=bool)
        boundary[rng.integers(8, 24), :] = True
        image_id = f"img{i}"
        gt.images[image_id] = [boundary]
        pio.write_tensor(boundary.astype(np.float64), contour_dir / f"{image_id}.head0.pstf")
    gt.save(tmp_path / "gt")
    return contour_dir, tmp_path / "gt"


class TestEval:
    def test_perfect_predictions_score_one(self, tmp_path, capsys):
        contour_dir, gt_dir = boundary_fixture(tmp_path)
        out = tmp_path / "eval"
        assert main(["eval", str(contour_dir), "--gt", str(gt_dir),
                     "--out", str(out)]) == 0
        report = json.loads((out / "result.json").read_text())
        assert report["F_ODS"] == 1.0
        assert report["F_OIS"] == 1.0
        assert set(report) >= {"F_ODS", "F_OIS", "AP", "ods_threshold",
                               "schema_version", "head", "tolerance", "thresholds"}
        assert "F_ODS 1.0000" in capsys.readouterr().out

    def test_outputs_csv_and_svg(self, tmp_path):
        contour_dir, gt_dir = boundary_fixture(tmp_path)
        out = tmp_path / "eval"
        main(["eval", str(contour_dir), "--gt", str(gt_dir), "--out", str(out)])
        lines = (out / "pr.csv").read_text().splitlines()
        assert lines[0] == "threshold,precision,recall,f"
        assert len(lines) == 1 + bench.DEFAULT_THRESHOLD_COUNT
        svg = (out / "pr.svg").read_text()
        assert svg.startswith("<svg") and "polyline" in svg

    def test_png_fallback_when_no_tensor(self, tmp_path):
        contour_dir, gt_dir = boundary_fixture(tmp_path)
        for pstf in contour_dir.glob("*.pstf"):
            values = pio.read_tensor(pstf)
            pio.write_contour_png(values, pstf.with_suffix(".png"))
            pstf.unlink()
        out = tmp_path / "eval"
        assert main(["eval", str(contour_dir), "--gt", str(gt_dir), "--out", str(out)]) == 0
        assert json.loads((out / "result.json").read_text())["F_ODS"] == 1.0

    def test_empty_contour_dir_exits_2(self, tmp_path, capsys):
        _, gt_dir = boundary_fixture(tmp_path)
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["eval", str(empty), "--gt", str(gt_dir),
                     "--out", str(tmp_path / "o")]) == 2
        assert "no contour maps" in capsys.readouterr().err

    def test_missing_ids_listed(self, tmp_path, capsys):
        contour_dir, gt_dir = boundary_fixture(tmp_path)
        (contour_dir / "img1.head0.pstf").unlink()
        assert main(["eval", str(contour_dir), "--gt", str(gt_dir),
                     "--out", str(tmp_path / "o")]) == 2
        assert "img1" in capsys.readouterr().err

    def test_missing_gt_index_exits_2(self, tmp_path, capsys):
        contour_dir, _ = boundary_fixture(tmp_path)
        assert main(["eval", str(contour_dir), "--gt", str(tmp_path / "nogt"),
                     "--out", str(tmp_path / "o")]) == 2
        assert "index" in capsys.readouterr().err

    def test_idempotent_outputs(self, tmp_path):
        contour_dir, gt_dir = boundary_fixture(tmp_path)
        main(["eval", str(contour_dir), "--gt", str(gt_dir), "--out", str(tmp_path / "a")])
        main(["eval", str(contour_dir), "--gt", str(gt_dir), "--out", str(tmp_path / "b")])
        for name in ("pr.csv", "result.json", "pr.svg"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# ---------------------------------------------------------------- pr-plot

class TestPrPlot:
    def test_plots_eval_output(self, tmp_path):
        contour_dir, gt_dir = boundary_fixture(tmp_path)
        main(["eval", str(contour_dir), "--gt", str(gt_dir), "--out", str(tmp_path / "e")])
        out = tmp_path / "curves.svg"
        assert main(["pr-plot", str(tmp_path / "e" / "pr.csv"),
                     "--out", str(out), "--title", "two runs"]) == 0
        svg = out.read_text()
        assert "two runs" in svg
        assert svg.count("<polyline") > 5  # grid + frame + curve

    def test_label_from_parent_for_generic_stem(self, tmp_path):
        contour_dir, gt_dir = boundary_fixture(tmp_path)
        main(["eval", str(contour_dir), "--gt", str(gt_dir), "--out", str(tmp_path / "modelA")])
        out = tmp_path / "c.svg"
        main(["pr-plot", str(tmp_path / "modelA" / "pr.csv"), "--out", str(out)])
        assert "modelA" in out.read_text()

    def test_missing_csv_exits_2(self, tmp_path, capsys):
        assert main(["pr-plot", str(tmp_path / "none.csv"),
                     "--out", str(tmp_path / "o.svg")]) == 2
        assert "none.csv" in capsys.readouterr().err

    def test_header_only_csv_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        assert main(["pr-plot", str(bad), "--out", str(tmp_path / "o.svg")]) == 2
        assert "precision" in capsys.readouterr().err


# ---------------------------------------------------------------- plumbing

class TestPlumbing:
    @pytest.mark.parametrize("verb,flags", [
        ("train", ["--config", "--seed", "--out", "--threads"]),
        ("connectivity", ["--out"]),
        ("contours", ["--out", "--eigenvectors"]),
        ("eval", ["--gt", "--out", "--head", "--tolerance", "--thresholds"]),
        ("pr-plot", ["--out", "--title"]),
    ])
    def test_help_documents_every_flag(self, verb, flags, capsys):
        with pytest.raises(SystemExit) as exc:
            main([verb, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in flags:
            assert flag in text

    def test_top_level_help_lists_verbs(self, capsys):
        with pytest.raises(SystemExit):
            main(["--help"])
        text = capsys.readouterr().out
        for verb in ("train", "connectivity", "contours", "eval", "pr-plot"):
            assert verb in text

    def test_log_level_from_environment(self, monkeypatch):
        monkeypatch.setenv("PREDSEG_LOG", "DEBUG")
        from predseg.cli import _configure_logging
        _configure_logging()
        assert logging.getLogger("predseg").level == logging.DEBUG
        monkeypatch.setenv("PREDSEG_LOG", "not-a-level")
        _configure_logging()
        assert logging.getLogger("predseg").level == logging.WARNING
