"""Checkpoint format, config validation, and CLI subcommands."""

import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tzk import checkpoint as ckpt_io
from tzk.cli import run
from tzk.config import Config, load_config, parse_config
from tzk.data import load_idx_pair, write_idx
from tzk.errors import ConfigError, FormatError
from tzk.tensor import Tensor
from tzk.trainer import AdamState


def tensor_table(arrays):
    return {name: Tensor(arr, requires_grad=True, name=name) for name, arr in arrays.items()}


class TestCheckpointFormat:
    names = st.text(st.characters(min_codepoint=33, max_codepoint=1000), min_size=1, max_size=24)
    shapes = st.lists(st.integers(1, 5), min_size=0, max_size=3)

    @given(st.dictionaries(names, st.tuples(shapes, st.booleans()), min_size=1, max_size=6),
           st.integers(0, 2 ** 63 - 1), st.integers(0, 10 ** 9))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_bit_identical(self, spec, seed, step):
        import tempfile
        from pathlib import Path
        tmpdir = tempfile.TemporaryDirectory()
        tmp = Path(tmpdir.name)
        rng = np.random.default_rng(0)
        arrays = {}
        for name, (shape, wide) in spec.items():
            dt = np.float64 if wide else np.float32
            arrays[name] = rng.standard_normal(shape).astype(dt)
        params = tensor_table(arrays)
        adam = AdamState(lr=1e-3, step=step % 1000,
                         m={n: a.astype(np.float64) for n, a in arrays.items()},
                         v={n: np.abs(a).astype(np.float64) for n, a in arrays.items()})
        path = str(tmp / "x.tzk")
        fp = bytes(range(32))
        ckpt_io.save(path, fp, seed, step, params, adam)
        ck = ckpt_io.load(path)
        assert ck.fingerprint == fp and ck.seed == seed and ck.next_step == step
        assert set(ck.params) == set(arrays)
        for name, arr in arrays.items():
            got = ck.params[name]
            assert got.dtype == arr.dtype and got.shape == arr.shape
            assert got.tobytes() == arr.tobytes()
            assert ck.adam_m[name].tobytes() == adam.m[name].tobytes()
        # saving the loaded state reproduces the file byte for byte
        params2 = tensor_table(ck.params)
        path2 = str(tmp / "y.tzk")
        ckpt_io.save(path2, ck.fingerprint, ck.seed, ck.next_step, params2,
                     ckpt_io.restore_adam(ck))
        assert open(path, "rb").read() == open(path2, "rb").read()

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "bad.tzk")
        with open(path, "wb") as fh:
            fh.write(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            ckpt_io.load(path)

    def test_truncation_reports_offset(self, tmp_path):
        params = tensor_table({"w": np.ones((3, 3), dtype=np.float32)})
        path = str(tmp_path / "t.tzk")
        ckpt_io.save(path, bytes(32), 1, 2, params, None)
        blob = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(blob[:-10])
        with pytest.raises(FormatError) as exc:
            ckpt_io.load(path)
        assert exc.value.offset is not None

    def test_trailing_garbage_rejected(self, tmp_path):
        params = tensor_table({"w": np.ones(2, dtype=np.float32)})
        path = str(tmp_path / "t.tzk")
        ckpt_io.save(path, bytes(32), 1, 2, params, None)
        with open(path, "ab") as fh:
            fh.write(b"xx")
        with pytest.raises(FormatError, match="trailing"):
            ckpt_io.load(path)

    def test_restore_model_rejects_mismatched_names(self, tmp_path):
        from helpers import toy_model
        model = toy_model(dim=2, c_dim=1, flow_steps=1, seed=0)
        path = str(tmp_path / "m.tzk")
        ckpt_io.save(path, bytes(32), 0, 0, tensor_table({"other": np.ones(1)}), None)
        with pytest.raises(FormatError, match="mismatch"):
            ckpt_io.restore_model(model, ckpt_io.load(path))


class TestConfig:
    def test_duplicate_heads_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            Config(heads=["digit:1", "digit:1"]).validate()

    def test_tile_must_divide_image(self):
        with pytest.raises(ConfigError, match="tile"):
            Config(tile=12, image_size=32).validate()

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError, match="lambda"):
            Config(heads=["k0"], lambda_by_head={"k0": -0.5}).validate()

    def test_small_c_dim_rejected(self):
        with pytest.raises(ConfigError, match="c_dim"):
            Config(c_dim=0).validate()

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config("not_a_key = 3")

    def test_bad_number_rejected(self):
        with pytest.raises(ConfigError, match="expects a number"):
            parse_config("lr = fast")

    def test_text_roundtrip(self):
        cfg = Config(seed=11, heads=["dataset:mnist", "digit:3"], lr=2.5e-4,
                     lambda_by_head={"digit:3": 0.25}, c_dim_by_head={"digit:3": 4},
                     epochs=7, data_dir="/tmp/data", freeze_policy="any_substitution")
        back = parse_config(cfg.to_text())
        assert back == cfg
        assert back.fingerprint() == cfg.fingerprint()

    def test_fingerprint_sensitive_to_model_fields(self):
        a = Config().validate()
        assert a.fingerprint() != Config(lr=2e-4).validate().fingerprint()
        assert a.fingerprint() != Config(flow_steps=9).validate().fingerprint()

    def test_fingerprint_ignores_run_control(self):
        a = Config(steps=100).validate()
        b = Config(steps=9999, checkpoint_interval=7, data_dir="/elsewhere").validate()
        assert a.fingerprint() == b.fingerprint()

    def test_comments_and_blank_lines_ignored(self):
        cfg = parse_config("# comment\n\nseed = 9  # trailing\n")
        assert cfg.seed == 9

    def test_lambda_lookup_uses_default(self):
        cfg = Config(heads=["a:1", "b:2"], lambda_default=0.5,
                     lambda_by_head={"b:2": 2.0})
        assert cfg.lam() == {"a:1": 0.5, "b:2": 2.0}


@pytest.fixture(scope="module")
def tiny_data_dir(tmp_path_factory):
    """A miniature digit dataset in real MNIST file layout."""
    root = tmp_path_factory.mktemp("data")
    rng = np.random.default_rng(0)
    for split, stem, n in (("train", "train", 96), ("test", "t10k", 32)):
        images = rng.integers(0, 256, (n, 28, 28), dtype=np.uint8)
        labels = (np.arange(n) % 10).astype(np.uint8)
        write_idx(str(root / f"{stem}-images-idx3-ubyte"), images)
        write_idx(str(root / f"{stem}-labels-idx1-ubyte"), labels)
    return str(root)


TINY_MODEL = ["--set", "flow_steps=2", "--set", "mlp_hidden=6", "--set", "mlp_depth=2",
              "--set", "private_layers=2", "--set", "heads=dataset:mnist,digit:0",
              "--set", "gap_samples=4", "--set", "batch_size=8",
              "--set", "checkpoint_interval=2"]


@pytest.fixture(scope="module")
def trained_run(tiny_data_dir, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    code = run(["train", "--data-dir", tiny_data_dir, "--out-dir", out,
                "--steps", "3", "--seed", "5"] + TINY_MODEL)
    assert code == 0
    return out


class TestCliTrainEvalSample:
    def test_train_writes_artifacts(self, trained_run):
        for name in ("ckpt_last.tzk", "trainlog.tsv", "loss_curve.png", "config.resolved.txt"):
            assert os.path.exists(os.path.join(trained_run, name)), name
        log = open(os.path.join(trained_run, "trainlog.tsv")).read().splitlines()
        assert log[0].startswith("step\tlog_enc\tlog_dec\tconsistency\tgap:dataset:mnist")
        assert len(log) == 4  # header + 3 steps

    def test_image_size_4_is_not_mnist_compatible(self, tiny_data_dir, tmp_path):
        # 28x28 files cannot feed a 4x4 model; loader rejects at ingest
        code = run(["train", "--data-dir", tiny_data_dir, "--out-dir", str(tmp_path),
                    "--steps", "1", "--set", "image_size=4", "--set", "tile=2"])
        assert code == 1

    def test_eval_prints_and_writes_report(self, trained_run, tiny_data_dir, tmp_path, capsys):
        out = str(tmp_path / "rep")
        code = run(["eval", "--ckpt", os.path.join(trained_run, "ckpt_last.tzk"),
                    "--data-dir", tiny_data_dir, "--split", "test", "--out-dir", out])
        assert code == 0
        printed = capsys.readouterr().out
        assert "prior" in printed and "bits/dim" in printed
        assert os.path.exists(os.path.join(out, "eval_report.tsv"))
        assert os.path.exists(os.path.join(out, "eval_report.png"))

    def test_sample_deterministic_and_pgm(self, trained_run, tmp_path):
        ckpt = os.path.join(trained_run, "ckpt_last.tzk")
        a, b = str(tmp_path / "a.png"), str(tmp_path / "b.png")
        for path in (a, b):
            code = run(["sample", "--ckpt", ckpt, "--knowledge", "digit:0",
                        "--rows", "2", "--cols", "5", "--seed", "7", "-o", path])
            assert code == 0
        assert open(a, "rb").read() == open(b, "rb").read()
        pgm = str(tmp_path / "c.pgm")
        assert run(["sample", "--ckpt", ckpt, "--seed", "7", "-o", pgm]) == 0
        with open(pgm, "rb") as fh:
            assert fh.read(2) == b"P5"

    def test_sample_unknown_head_is_runtime_error(self, trained_run, tmp_path):
        code = run(["sample", "--ckpt", os.path.join(trained_run, "ckpt_last.tzk"),
                    "--knowledge", "digit:77", "-o", str(tmp_path / "x.png")])
        assert code == 1

    def test_resume_continues_from_checkpoint(self, tiny_data_dir, tmp_path):
        out = str(tmp_path / "resume_run")
        assert run(["train", "--data-dir", tiny_data_dir, "--out-dir", out,
                    "--steps", "2", "--seed", "5"] + TINY_MODEL) == 0
        code = run(["train", "--data-dir", tiny_data_dir, "--out-dir", out,
                    "--steps", "4", "--seed", "5", "--resume",
                    os.path.join(out, "ckpt_last.tzk")] + TINY_MODEL)
        assert code == 0
        ck = ckpt_io.load(os.path.join(out, "ckpt_last.tzk"))
        assert ck.next_step == 4

    def test_fingerprint_mismatch_on_eval_rejected(self, trained_run, tiny_data_dir, tmp_path):
        cfg_path = str(tmp_path / "other.txt")
        with open(os.path.join(trained_run, "config.resolved.txt")) as fh:
            text = fh.read().replace("lr = 0.0001", "lr = 0.0002")
        with open(cfg_path, "w") as fh:
            fh.write(text)
        code = run(["eval", "--ckpt", os.path.join(trained_run, "ckpt_last.tzk"),
                    "--config", cfg_path, "--data-dir", tiny_data_dir])
        assert code == 2


class TestCliErrors:
    def test_missing_config_file_names_it(self, capsys):
        code = run(["train", "--config", "missing.toml-like"])
        assert code == 2
        assert "missing.toml-like" in capsys.readouterr().err

    def test_bad_flag_usage_error(self):
        assert run(["train", "--nonsense"]) == 2

    def test_no_subcommand_usage_error(self):
        assert run([]) == 2

    def test_config_error_exit_2(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("tile = 12\n")
        assert run(["train", "--config", str(cfg)]) == 2

    def test_check_subcommand_passes(self, capsys):
        assert run(["check", "--trials", "6", "--tol", "1e-3"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 3


class TestCliConvert:
    def test_convert_omniglot_tree(self, tmp_path):
        from tzk.evaluation import write_png
        d = tmp_path / "tree" / "alphabet" / "char1"
        os.makedirs(d)
        for k in range(3):
            img = np.full((105, 105), 255, dtype=np.uint8)
            img[20:80, 30:40 + k] = 0
            write_png(str(d / f"{k}.png"), img)
        out = str(tmp_path / "out")
        assert run(["convert-omniglot", "--src", str(tmp_path / "tree"),
                    "--out-dir", out, "--prefix", "omniglot-train"]) == 0
        images, labels = load_idx_pair(os.path.join(out, "omniglot-train-images-idx3-ubyte"),
                                       os.path.join(out, "omniglot-train-labels-idx1-ubyte"))
        assert images.shape == (3, 32, 32)
        assert np.all(labels == 0)
