"""End-to-end checks of the command-line interface and its exit codes."""

import json
import os

import numpy as np
import pytest

from APP.cli import main
from APP.helpers.config_manager import DEFAULT_CONFIG
from APP.helpers.tensor_io import read_tensor

TINY_RUN = {
    "generator": {"max_resolution": 8, "base_channels": 8, "latent_dim": 8, "n_mapping": 2, "seed": 0,
                  "checkpoint": None},
    "encoder": {"backbone_widths": [8, 8, 8, 8], "backbone_blocks": [1, 1, 1, 1], "stem_stride": 1, "steps": 2,
                "learning_rate": 0.001, "batch_size": 2, "checkpoint": None},
    "hypernet": {"head_variant": "per_channel_shared_mix", "layer_policy": "medium_fine_conv",
                 "refinement_steps": 2, "backbone_feature_shape": [1, 1, 8], "shared_fc_dim": 8,
                 "backbone_widths": [8, 8, 8, 8], "backbone_blocks": [1, 1, 1, 1], "stem_stride": 1},
    "train": {"learning_rate": 0.001, "batch_size": 2, "steps": 3, "refinement_steps": 2, "optimizer": "ranger",
              "seed": 0, "detach_between_steps": False, "log_every": 0, "checkpoint_every": 0,
              "train_images": 4, "heldout_images": 3},
    "loss": DEFAULT_CONFIG["loss"],
    "output_dir": "runs/tiny",
    "seed": 0,
}


def write_config(path, data):
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def last_json(capsys):
    return json.loads(capsys.readouterr().out)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = write_config(root / "tiny.json", TINY_RUN)
    run_dir = str(root / "run")
    assert main(["--device", "cpu", "train", "--config", config, "--out", run_dir]) == 0
    return run_dir


class TestCountParams:
    def test_final_configuration(self, capsys):
        assert main(["count-params", "--json"]) == 0
        report = last_json(capsys)
        assert abs(report["total"] - 332_000_000) <= 33_200_000
        assert report["spec"] == "stylegan2-1024"

    def test_no_layers_is_backbone_only(self, capsys):
        assert main(["count-params", "--layers", "none", "--json"]) == 0
        report = last_json(capsys)
        assert report["total"] == report["backbone_params"]
        assert report["heads"] == []

    def test_table(self, capsys):
        assert main(["count-params", "--compare-heads", "--json"]) == 0
        rows = last_json(capsys)
        totals = {row["head_variant"]: row["total"] for row in rows}
        assert totals["per_parameter_naive"] >= totals["per_channel_standard"] >= totals["per_channel_shared_mix"]

    def test_toy_spec_text(self, capsys):
        assert main(["count-params", "--spec", "toy-32-32"]) == 0
        assert "toy" in capsys.readouterr().out

    def test_unreadable_spec(self, tmp_path):
        assert main(["count-params", "--spec", str(tmp_path / "missing.json")]) == 3

    def test_bad_toy_name(self):
        assert main(["count-params", "--spec", "toy-big"]) == 2

    def test_usage_error(self):
        assert main(["count-params", "--heads", "dense"]) == 2


class TestTrain:
    def test_missing_sections(self, tmp_path):
        config = write_config(tmp_path / "partial.json", {"train": {"steps": 1}})
        assert main(["train", "--config", config]) == 2

    def test_dry_run(self, tmp_path, capsys):
        config = write_config(tmp_path / "full.json", DEFAULT_CONFIG)
        assert main(["--device", "cpu", "train", "--config", config, "--dry-run", "--seed", "4"]) == 0
        counts = last_json(capsys)
        assert counts["hypernet"] == counts["hypernet_analytical"]
        assert len(counts["config_hash"]) == 64

    def test_loss_preset(self, tmp_path, capsys):
        config = write_config(tmp_path / "full.json", DEFAULT_CONFIG)
        hashes = {}
        for preset in ("faces", "generic"):
            assert main(["--device", "cpu", "train", "--config", config, "--dry-run", "--loss-preset", preset]) == 0
            hashes[preset] = last_json(capsys)["config_hash"]
        assert hashes["faces"] != hashes["generic"]
        assert main(["train", "--config", config, "--dry-run", "--loss-preset", "cars"]) == 2

    def test_refinement_override_is_the_inference_default(self, tmp_path, capsys):
        data = json.loads(json.dumps(TINY_RUN))
        data["train"]["steps"] = 1
        config = write_config(tmp_path / "tiny.json", data)
        run_dir = str(tmp_path / "run")
        assert main(["--device", "cpu", "train", "--config", config, "--out", run_dir, "-T", "3"]) == 0
        capsys.readouterr()
        with open(os.path.join(run_dir, "heldout_metrics.json"), encoding="utf-8") as f:
            assert len(json.load(f)["per_step_mean_l2"]) == 4
        with open(os.path.join(run_dir, "experiment.json"), encoding="utf-8") as f:
            saved = json.load(f)
        assert saved["hypernet"]["refinement_steps"] == saved["train"]["refinement_steps"] == 3
        assert main(["invert", run_dir, "--sampled", "2", "--out", str(tmp_path / "inv")]) == 0
        assert len(last_json(capsys)["per_step_l2"]) == 4

    def test_run_layout(self, tiny_run):
        for name in ("generator", "encoder", "hypernet", "experiment.json", "train_log.jsonl",
                     "heldout_metrics.json"):
            assert os.path.exists(os.path.join(tiny_run, name)), name
        with open(os.path.join(tiny_run, "train_log.jsonl"), encoding="utf-8") as f:
            assert len(f.read().splitlines()) == 3
        with open(os.path.join(tiny_run, "heldout_metrics.json"), encoding="utf-8") as f:
            assert len(json.load(f)["per_step_mean_l2"]) == 3


class TestInvertAndAdapt:
    def test_invert_outputs(self, tiny_run, tmp_path, capsys):
        out = str(tmp_path / "inv")
        assert main(["invert", tiny_run, "--sampled", "3", "-T", "2", "--out", out]) == 0
        metrics = last_json(capsys)
        assert len(metrics["per_step_l2"]) == 3
        assert metrics["n_images"] == 3
        for name in ("reconstruction.png", "offsets", "w_init.bin", "reconstruction.bin", "metrics.json",
                     "inversion.json"):
            assert os.path.exists(os.path.join(out, name)), name
        assert read_tensor(os.path.join(out, "reconstruction.bin")).shape == (3, 3, 8, 8)

    def test_invert_rejects_step_count(self, tiny_run, tmp_path):
        assert main(["invert", tiny_run, "-T", "11", "--out", str(tmp_path / "inv")]) == 2

    def test_invert_missing_checkpoint(self, tmp_path):
        assert main(["invert", str(tmp_path / "absent"), "--out", str(tmp_path / "inv")]) == 1

    def test_baselines(self, tiny_run, tmp_path):
        out = str(tmp_path / "inv")
        assert main(["invert", tiny_run, "--sampled", "2", "--out", out, "--compare-baselines",
                     "--latent-steps", "2", "--finetune-steps", "2"]) == 0
        with open(os.path.join(out, "baselines.json"), encoding="utf-8") as f:
            assert len(json.load(f)) == 3

    def test_adapt_to_same_generator_reproduces_reconstruction(self, tiny_run, tmp_path):
        inv, adapted = str(tmp_path / "inv"), str(tmp_path / "adapted")
        assert main(["invert", tiny_run, "--sampled", "2", "--out", inv]) == 0
        assert main(["adapt", inv, "--target", tiny_run, "--out", adapted]) == 0
        np.testing.assert_allclose(read_tensor(os.path.join(adapted, "adapted.bin")),
                                   read_tensor(os.path.join(inv, "reconstruction.bin")), atol=1e-5)
        assert os.path.exists(os.path.join(adapted, "adapted.png"))

    def test_adapt_to_perturbed_generator(self, tiny_run, tmp_path):
        inv, adapted = str(tmp_path / "inv"), str(tmp_path / "adapted")
        assert main(["invert", tiny_run, "--sampled", "2", "--out", inv]) == 0
        assert main(["adapt", inv, "--perturb", "0.2", "--out", adapted]) == 0
        assert not np.allclose(read_tensor(os.path.join(adapted, "adapted.bin")),
                               read_tensor(os.path.join(inv, "reconstruction.bin")))

    def test_adapt_needs_target(self, tiny_run, tmp_path):
        inv = str(tmp_path / "inv")
        assert main(["invert", tiny_run, "--sampled", "1", "--out", inv]) == 0
        assert main(["adapt", inv, "--out", str(tmp_path / "adapted")]) == 2


class TestEditing:
    def test_directions_then_edit(self, tiny_run, tmp_path):
        path = str(tmp_path / "dirs.json")
        assert main(["directions", tiny_run, "--n-samples", "200", "--components", "2", "--out", path]) == 0
        with open(path, encoding="utf-8") as f:
            assert len(json.load(f)) == 2
        out = str(tmp_path / "edit")
        assert main(["edit", tiny_run, "--directions", path, "--strengths", "-1,0,1", "--out", out]) == 0
        assert os.path.exists(os.path.join(out, "edits.png"))

    def test_edit_discovers_directions(self, tiny_run, tmp_path):
        out = str(tmp_path / "edit")
        assert main(["edit", tiny_run, "--pca", "2", "--out", out]) == 0
        assert os.path.exists(os.path.join(out, "directions.json"))

    def test_edit_rejects_bad_strengths(self, tiny_run, tmp_path):
        assert main(["edit", tiny_run, "--strengths", "a,b", "--out", str(tmp_path / "edit")]) == 2

    def test_edit_rejects_sample_index(self, tiny_run, tmp_path):
        assert main(["edit", tiny_run, "--sample", "5", "--out", str(tmp_path / "edit")]) == 2
