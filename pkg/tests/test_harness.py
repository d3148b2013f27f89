import struct
from pathlib import Path

import numpy as np
import pytest

from grape_dp.errors import ConfigurationError, FormatError, InvalidArgumentError
from grape_dp.harness import datasets
from grape_dp.harness.cli import main as cli_main
from grape_dp.harness.config import build_config, parse_config_file
from grape_dp.harness.experiments import run_experiment, spectrum_experiment
from grape_dp.models import batch_grads, init_params
from grape_dp.tensor import RngStream, singular_values


class TestDatasets:
    def test_synthetic_gaussian_deterministic(self):
        a = datasets.load_dataset("synthetic-gaussian", n=1000, dim=20, classes=3,
                                  stream=RngStream(1))
        b = datasets.load_dataset("synthetic-gaussian", n=1000, dim=20, classes=3,
                                  stream=RngStream(1))
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
        assert a.x.min() >= 0.0 and a.x.max() <= 1.0
        assert set(np.unique(a.y)) <= {0, 1, 2}

    def test_margin_data_is_separable(self):
        data = datasets.load_dataset("two-class-margin", n=200, dim=10, margin=1.0,
                                     stream=RngStream(7))
        assert data.x.min() >= 0.0 and data.x.max() <= 1.0
        assert datasets.perceptron_separates(data)

    def test_margin_requires_positive_margin(self):
        with pytest.raises(InvalidArgumentError):
            datasets.load_dataset("two-class-margin", n=10, dim=2, margin=0.0,
                                  stream=RngStream(0))

    def test_unknown_source_rejected(self):
        with pytest.raises(InvalidArgumentError):
            datasets.load_dataset("mnist")


def _write_idx_pair(tmp_path: Path, count=3, rows=2, cols=2):
    images = tmp_path / "images-idx3-ubyte"
    labels = tmp_path / "labels-idx1-ubyte"
    pixel = bytes(range(count * rows * cols))
    images.write_bytes(struct.pack(">IIII", 0x803, count, rows, cols) + pixel)
    labels.write_bytes(struct.pack(">II", 0x801, count) + bytes([0, 1, 2][:count]))
    return images, labels


class TestIdxFormat:
    def test_roundtrip(self, tmp_path):
        images, labels = _write_idx_pair(tmp_path)
        data = datasets.load_idx_files(images, labels)
        assert data.x.shape == (3, 4)
        assert data.x.max() <= 1.0 and data.x.min() >= 0.0
        assert np.array_equal(data.y, [0, 1, 2])
        assert data.x[1, 0] == pytest.approx(4 / 255)

    def test_wrong_image_magic(self, tmp_path):
        bad = tmp_path / "bad"
        bad.write_bytes(struct.pack(">IIII", 0x804, 1, 1, 1) + b"\x00")
        with pytest.raises(FormatError) as err:
            datasets.read_idx_images(bad)
        assert err.value.offset == 0

    def test_wrong_label_magic(self, tmp_path):
        bad = tmp_path / "bad"
        bad.write_bytes(struct.pack(">II", 0x803, 1) + b"\x00")
        with pytest.raises(FormatError):
            datasets.read_idx_labels(bad)

    def test_truncated_pixels_report_offset(self, tmp_path):
        bad = tmp_path / "trunc"
        bad.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + b"\x00" * 5)
        with pytest.raises(FormatError) as err:
            datasets.read_idx_images(bad)
        assert err.value.offset == 21  # header + the 5 bytes that were present

    def test_count_mismatch(self, tmp_path):
        images, labels = _write_idx_pair(tmp_path, count=3)
        short = tmp_path / "short-labels"
        short.write_bytes(struct.pack(">II", 0x801, 2) + bytes([0, 1]))
        with pytest.raises(FormatError):
            datasets.load_idx_files(images, short)


class TestConfig:
    def test_file_plus_overrides(self, tmp_path):
        cfg_file = tmp_path / "exp.cfg"
        cfg_file.write_text(
            "# comment\nmethod = dp-adam\npriv.epsilon = 4\ntrain.steps = 7\nseed = 3\n"
        )
        cfg = build_config(cfg_file, {"method": "dp-grape", "proj.r": "2"})
        assert cfg.method == "dp-grape"  # flags win
        assert cfg.epsilon == 4.0
        assert cfg.steps == 7
        assert cfg.rank == 2

    def test_unknown_key_rejected(self, tmp_path):
        cfg_file = tmp_path / "exp.cfg"
        cfg_file.write_text("mystery = 1\n")
        with pytest.raises(ConfigurationError):
            build_config(cfg_file)

    def test_private_method_needs_budget(self):
        with pytest.raises(ConfigurationError, match="priv.epsilon"):
            build_config(None, {"method": "dp-grape", "priv.epsilon": "",
                                "priv.sigma": ""})

    def test_missing_idx_file_rejected(self):
        with pytest.raises(ConfigurationError, match="data.images"):
            build_config(None, {"data.source": "idx-files", "data.images": "/nope",
                                "data.labels": "/nope2"})

    def test_malformed_line_rejected(self, tmp_path):
        cfg_file = tmp_path / "exp.cfg"
        cfg_file.write_text("method dp-grape\n")
        with pytest.raises(ConfigurationError):
            parse_config_file(cfg_file)


def _fast_overrides(tmp_path, **extra):
    base = {
        "method": "dp-grape",
        "model.sizes": "12,2",
        "data.source": "two-class-margin",
        "data.n": "256",
        "data.dim": "12",
        "priv.epsilon": "8",
        "train.steps": "12",
        "train.batch": "32",
        "train.record_every": "5",
        "proj.r": "2",
        "opt.lr": "0.05",
        "seed": "4",
        "out": str(tmp_path / "run.csv"),
    }
    base.update(extra)
    return base


class TestRunExperiment:
    def test_repeat_runs_are_byte_identical(self, tmp_path):
        cfg1 = build_config(None, _fast_overrides(tmp_path, out=str(tmp_path / "a.csv")))
        cfg2 = build_config(None, _fast_overrides(tmp_path, out=str(tmp_path / "b.csv")))
        with pytest.warns(UserWarning):
            run_experiment(cfg1, quiet=True)
            run_experiment(cfg2, quiet=True)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_records_and_epsilon_cap(self, tmp_path):
        cfg = build_config(None, _fast_overrides(tmp_path))
        with pytest.warns(UserWarning):
            records = run_experiment(cfg, quiet=True)
        steps = [r.step for r in records]
        assert steps == sorted(steps) and steps[0] == 0 and steps[-1] == 12
        assert all(r.epsilon <= 8.0 for r in records)
        assert records[-1].accuracy > 0.8

    def test_csv_columns(self, tmp_path):
        cfg = build_config(None, _fast_overrides(tmp_path))
        with pytest.warns(UserWarning):
            run_experiment(cfg, quiet=True)
        lines = (tmp_path / "run.csv").read_text().splitlines()
        header = [ln for ln in lines if not ln.startswith("#")][0]
        assert header == "step,loss,acc,epsilon,walltime_ms"
        assert any("shuffling each epoch" in ln for ln in lines if ln.startswith("#"))

    def test_theory_final_iterate_snapshot(self, tmp_path):
        over = _fast_overrides(tmp_path, **{"train.theory_final_iterate": "true"})
        cfg = build_config(None, over)
        with pytest.warns(UserWarning):
            records = run_experiment(cfg, quiet=True)
        assert records[-1].step == 12

    def test_block_sgd_method_runs(self, tmp_path):
        over = _fast_overrides(tmp_path, method="block-sgd", **{"opt.lr": "0.5"})
        cfg = build_config(None, over)
        with pytest.warns(UserWarning):
            records = run_experiment(cfg, quiet=True)
        assert np.isfinite(records[-1].loss)

    def test_nonprivate_adam_reports_inf_epsilon(self, tmp_path):
        over = _fast_overrides(tmp_path, method="adam")
        over["priv.epsilon"] = ""
        cfg = build_config(None, over)
        records = run_experiment(cfg, quiet=True)
        assert all(np.isinf(r.epsilon) for r in records)


class TestSpectrum:
    def _cfg(self, tmp_path):
        return build_config(None, {
            "method": "adam",
            "model.sizes": "16,12,2",
            "model.bias": "false",
            "data.source": "two-class-margin",
            "data.n": "128",
            "data.dim": "16",
            "train.batch": "32",
            "seed": "2",
            "out": str(tmp_path / "x.csv"),
        })

    def test_identity_transform_equals_raw_spectrum(self, tmp_path):
        cfg = self._cfg(tmp_path)
        rows = spectrum_experiment(cfg, [float("inf")], [0.0], 8, quiet=True)
        # oracle: spectrum of the plain batch gradient of the eligible layer
        master = RngStream(cfg.seed)
        data = datasets.load_dataset("two-class-margin", n=128, dim=16, margin=1.0,
                                     stream=master.derive(0xDA))
        params = init_params(cfg.model, master.derive(0x11))
        batch = data.subset(np.arange(32))
        w_grads, _ = batch_grads(params, batch)
        expect = singular_values(w_grads[0], 8)
        got = np.array([r[3] for r in rows])
        assert np.allclose(got, expect, atol=1e-12)

    def test_flattening_ratio_increases(self, tmp_path):
        cfg = self._cfg(tmp_path)
        rows = spectrum_experiment(cfg, [float("inf"), 1.0], [0.0, 2.0], 8, quiet=True)
        by_combo = {}
        for c, s, i, sv, rel, nrm in rows:
            by_combo.setdefault((c, s), {})[i] = rel
        raw_tail = by_combo[(float("inf"), 0.0)][8]
        noisy_tail = by_combo[(1.0, 2.0)][8]
        assert noisy_tail > raw_tail

    def test_infinite_clip_with_noise_skipped(self, tmp_path):
        cfg = self._cfg(tmp_path)
        rows = spectrum_experiment(cfg, [float("inf")], [2.0], 4, quiet=True)
        assert rows == []

    def test_oversized_k_rejected(self, tmp_path):
        cfg = self._cfg(tmp_path)
        with pytest.raises(InvalidArgumentError):
            spectrum_experiment(cfg, [1.0], [0.0], 13, quiet=True)

    def test_csv_written_with_recipe_header(self, tmp_path):
        cfg = self._cfg(tmp_path)
        out = tmp_path / "spec.csv"
        spectrum_experiment(cfg, [1.0], [0.5], 4, out=out, quiet=True)
        text = out.read_text()
        assert "# recipe:" in text
        assert "C,sigma,index,s,s_over_s1,s_norm_avg" in text


class TestCli:
    def test_train_and_plot(self, tmp_path):
        out = tmp_path / "cli.csv"
        code = cli_main([
            "train", "--method", "dp-grape", "--epsilon", "8", "--r", "2",
            "--seed", "1", "--steps", "6", "--out", str(out), "--quiet",
            "--set", "model.sizes=12,2", "--set", "data.n=128", "--set", "data.dim=12",
            "--set", "train.batch=16",
        ])
        assert code == 0
        assert out.exists() and out.with_suffix(".png").exists()

    def test_calibration_error_exits_nonzero(self, tmp_path, capsys):
        code = cli_main([
            "train", "--method", "dp-grape", "--epsilon", "", "--sigma", "",
            "--out", str(tmp_path / "x.csv"), "--quiet",
        ])
        assert code == 2
        assert "priv.epsilon" in capsys.readouterr().err

    def test_epsilon_beyond_bound_exits_nonzero(self, tmp_path, capsys):
        code = cli_main([
            "train", "--method", "dp-adam", "--epsilon", "1000",
            "--set", "data.n=128", "--set", "train.batch=16", "--set", "model.sizes=20,2",
            "--steps", "4", "--out", str(tmp_path / "x.csv"), "--quiet",
        ])
        assert code == 2
        assert "epsilon" in capsys.readouterr().err

    def test_memory_subcommand(self, tmp_path, capsys):
        out = tmp_path / "mem.csv"
        code = cli_main([
            "memory", "--method", "dp-grape", "--spec", "16,24,12", "--batch", "8",
            "--r", "4", "--steps", "2", "--out", str(out), "--no-plot",
        ])
        assert code == 0
        body = out.read_text().splitlines()
        assert body[0] == "method,category,predicted,measured"
        assert len(body) == 5

    def test_spectrum_subcommand(self, tmp_path):
        out = tmp_path / "s.csv"
        code = cli_main([
            "spectrum", "--clips", "inf,1.0", "--sigmas", "0,1.0", "--k", "4",
            "--out", str(out), "--no-plot",
            "--set", "model.sizes=12,8,2", "--set", "model.bias=false",
            "--set", "data.n=64", "--set", "data.dim=12", "--set", "train.batch=16",
        ])
        assert code == 0
        assert out.exists()

    def test_thread_cap_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("GRAPE_DP_THREADS", "1")
        code = cli_main([
            "memory", "--method", "adam", "--spec", "8,6", "--batch", "4", "--r", "2",
            "--out", str(tmp_path / "m.csv"), "--no-plot",
        ])
        assert code == 0

    def test_train_on_idx_files_end_to_end(self, tmp_path):
        rng = np.random.default_rng(0)
        count, rows, cols = 24, 3, 3
        pixels = rng.integers(0, 256, size=count * rows * cols, dtype=np.uint8)
        (tmp_path / "imgs").write_bytes(
            struct.pack(">IIII", 0x803, count, rows, cols) + pixels.tobytes())
        (tmp_path / "labs").write_bytes(
            struct.pack(">II", 0x801, count)
            + rng.integers(0, 3, size=count, dtype=np.uint8).tobytes())
        out = tmp_path / "idx.csv"
        code = cli_main([
            "train", "--method", "adam", "--steps", "3", "--out", str(out),
            "--quiet", "--no-plot",
            "--set", "data.source=idx-files",
            "--set", f"data.images={tmp_path / 'imgs'}",
            "--set", f"data.labels={tmp_path / 'labs'}",
            "--set", "model.sizes=9,3", "--set", "train.batch=8",
            "--set", "priv.epsilon=",
        ])
        assert code == 0
        body = [ln for ln in out.read_text().splitlines() if not ln.startswith("#")]
        assert body[0] == "step,loss,acc,epsilon,walltime_ms"
        assert len(body) >= 2

    def test_shipped_config_files_parse(self):
        for name in ("configs/margin-logistic.cfg", "configs/mlp-spectrum.cfg"):
            cfg = build_config(Path(__file__).resolve().parent.parent / name)
            assert cfg.batch >= 1
