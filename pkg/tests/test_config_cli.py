"""Config grammar, layered overrides and command-line smoke tests."""

import json
import os

import numpy as np
import pytest

from deformfield.cli import main
from deformfield.config import (
    ConfigError,
    RunConfig,
    load_run_config,
    parse_config_text,
    parse_value,
)


class TestValueGrammar:
    def test_scalars(self):
        assert parse_value("true") is True
        assert parse_value("off") is False
        assert parse_value("42") == 42
        assert parse_value("-1.5e-3") == -1.5e-3
        assert parse_value("'hello world'") == "hello world"
        assert parse_value("bare") == "bare"

    def test_tuples(self):
        assert parse_value("1, 2, 3") == (1, 2, 3)
        assert parse_value("1.0, 2") == (1.0, 2)

    def test_text_parsing(self):
        text = """
        # a comment
        train.steps = 100   # trailing comment
        model.code_dim = 32
        precision = double
        """
        d = parse_config_text(text)
        assert d == {"train.steps": 100, "model.code_dim": 32,
                     "precision": "double"}

    def test_bad_lines(self):
        with pytest.raises(ConfigError):
            parse_config_text("no equals sign here")
        with pytest.raises(ConfigError):
            parse_config_text("= value")


class TestRunConfig:
    def test_defaults_roundtrip(self):
        cfg = RunConfig()
        cfg2 = RunConfig.from_dict(cfg.to_dict())
        assert cfg2.to_dict() == cfg.to_dict()

    def test_dotted_set(self):
        cfg = RunConfig()
        cfg.set("train.steps", "123")
        cfg.set("model.encoder_widths", "8, 16, 32")
        cfg.set("seed", "7")
        assert cfg.train.steps == 123
        assert cfg.model.encoder_widths == (8, 16, 32)
        assert cfg.seed == 7

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig().set("train.does_not_exist", "1")
        with pytest.raises(ConfigError):
            RunConfig().set("nosection.steps", "1")

    def test_type_coercion_errors(self):
        cfg = RunConfig()
        with pytest.raises(ConfigError):
            cfg.set("train.steps", "1.5")
        with pytest.raises(ConfigError):
            cfg.set("deterministic", "7")
        with pytest.raises(ConfigError):
            cfg.set("train.learning_rate", "fast")

    def test_file_then_override_layering(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("train.steps = 10\nseed = 3\n")
        cfg = load_run_config(str(path), [("train.steps", "20")])
        assert cfg.train.steps == 20
        assert cfg.seed == 3


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("data"))
    rc = main(["gen-data", "--ids", "1", "--views", "3", "--size", "16",
               "--seed", "5", "-o", out])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def ckpt_path(tmp_path_factory, dataset_dir):
    out = str(tmp_path_factory.mktemp("run") / "model.bin")
    rc = main(["train", "--data", dataset_dir, "--steps", "2",
               "--seed", "0", "-o", out,
               "--set", "model.code_dim=4",
               "--set", "model.weight_volume_resolution=8",
               "--set", "model.feature_channels=3",
               "--set", "model.feature_resolution=8",
               "--set", "model.encoder_widths=2,3,4",
               "--set", "model.embed_dim=4",
               "--set", "model.inter_dim=4",
               "--set", "model.head_hidden=6",
               "--set", "model.posenc_octaves=2",
               "--set", "model.decoder_channels=4,3",
               "--set", "train.samples_per_ray=8",
               "--set", "train.patches_per_step=1",
               "--set", "train.patch_size=6"])
    assert rc == 0
    return out


class TestCLI:
    def test_gen_data_counts(self, tmp_path):
        out = str(tmp_path / "d")
        rc = main(["gen-data", "--ids", "2", "--views", "6", "--poses", "3",
                   "--size", "16", "-o", out])
        assert rc == 0
        man = json.load(open(os.path.join(out, "manifest.json")))
        n = sum(len(r["samples"]) for r in man["identities"])
        assert n == 36

    def test_gen_data_deterministic(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (a, b):
            assert main(["gen-data", "--ids", "1", "--views", "2",
                         "--size", "16", "--seed", "4", "-o", out]) == 0
        ia = open(os.path.join(a, "id000_p000_v000.png"), "rb").read()
        ib = open(os.path.join(b, "id000_p000_v000.png"), "rb").read()
        assert ia == ib

    def test_train_writes_checkpoint(self, ckpt_path):
        assert os.path.exists(ckpt_path)

    def test_render_command(self, ckpt_path, dataset_dir, tmp_path):
        out = str(tmp_path / "view.png")
        rc = main(["render", "--ckpt", ckpt_path, "--data", dataset_dir,
                   "--view", "0", "--set", "samples_per_ray=8", "-o", out])
        assert rc == 0 and os.path.exists(out)

    def test_animate_command(self, ckpt_path, dataset_dir, tmp_path):
        out = str(tmp_path / "frames")
        rc = main(["animate", "--ckpt", ckpt_path, "--data", dataset_dir,
                   "--frames", "2", "--set", "samples_per_ray=4", "-o", out])
        assert rc == 0
        assert len([f for f in os.listdir(out) if f.endswith(".png")]) == 2

    def test_optimize_shape_command(self, ckpt_path, dataset_dir, tmp_path):
        out = str(tmp_path / "code.bin")
        rc = main(["optimize-shape", "--ckpt", ckpt_path, "--data", dataset_dir,
                   "--steps", "1", "--set", "samples_per_ray=4", "-o", out])
        assert rc == 0 and os.path.exists(out)

    def test_eval_command(self, ckpt_path, dataset_dir, tmp_path):
        out = str(tmp_path / "report.json")
        rc = main(["eval", "--ckpt", ckpt_path, "--data", dataset_dir,
                   "--views", "2", "--set", "samples_per_ray=4", "-o", out])
        assert rc == 0
        d = json.load(open(out))
        assert "mean_psnr" in d

    def test_missing_file_exit_code(self, tmp_path):
        rc = main(["render", "--ckpt", str(tmp_path / "nope.bin"),
                   "--data", str(tmp_path), "-o", str(tmp_path / "x.png")])
        assert rc == 2

    def test_bad_override_exit_code(self, dataset_dir, tmp_path):
        rc = main(["train", "--data", dataset_dir, "--steps", "1",
                   "-o", str(tmp_path / "m.bin"), "--set", "bogus.key=1"])
        assert rc == 1

    def test_gradcheck_suite_exit_code(self):
        assert main(["gradcheck-suite", "--seeds", "1"]) == 0
