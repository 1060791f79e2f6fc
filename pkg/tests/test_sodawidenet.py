#!/usr/bin/env python3
"""
Command Line Tests
==================

Every subcommand through main(), including exit codes for usage, data
and numerical failures.
"""

import json
import os
import pathlib
import sys

import numpy as np
import pytest

# Add the scripts directory to path
sys.path.insert(0, str(pathlib.Path(__file__).parent.parent / "scripts"))

import sodawidenet as cli
import tensor_engine as te
from tensor_io import read_netpbm
from training import NumericalError

TINY_NETWORK = {
    "base_channels": 4,
    "groupnorm_groups": 2,
    "input_resolution": 32,
    "dilation_schedule": {"HB1": [1, 2], "HB2": [1, 2], "CB2": [1, 2], "CB3": [1, 2]},
}


@pytest.fixture(autouse=True)
def log_dir(tmp_path, mocker):
    mocker.patch.object(cli, "LOG_DIR", tmp_path / "logs")
    return tmp_path / "logs"


@pytest.fixture
def synth(tmp_path):
    out = tmp_path / "synth"
    assert cli.main(["synth", "--count", "2", "--resolution", "32", "--out", str(out), "--seed", "1"]) == cli.EXIT_OK
    return out


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({"network": TINY_NETWORK, "data": {"batch_size": 2}}))
    return path


class TestUsage:
    def test_missing_command(self, capsys):
        assert cli.main([]) == cli.EXIT_USAGE
        assert "usage error" in capsys.readouterr().err

    def test_unknown_flag(self):
        assert cli.main(["inspect", "--bogus"]) == cli.EXIT_USAGE

    def test_even_alpha_window_rejected(self):
        assert cli.main(["train", "--alpha-window", "4"]) == cli.EXIT_USAGE

    def test_train_without_manifest_is_a_config_error(self, log_dir):
        assert cli.main(["train", "--epochs", "1"]) == cli.EXIT_USAGE
        assert "train_manifest" in (log_dir / "train.log").read_text()

    def test_invalid_config_field(self):
        assert cli.main(["inspect", "--resolution", "100"]) == cli.EXIT_USAGE


class TestSynth:
    def test_writes_manifest_and_files(self, synth):
        records = json.loads((synth / "manifest.json").read_text())
        assert len(records) == 2
        assert (synth / records[0]["mask"]).exists()

    def test_flips(self, tmp_path):
        out = tmp_path / "flips"
        assert cli.main(["synth", "--count", "2", "--resolution", "16", "--flips", "--out", str(out)]) == cli.EXIT_OK
        assert len(json.loads((out / "manifest_flips.json").read_text())) == 6

    def test_zero_count(self, tmp_path):
        assert cli.main(["synth", "--count", "0", "--out", str(tmp_path / "x")]) == cli.EXIT_USAGE


class TestInspect:
    def test_reference_table_and_json(self, tmp_path, capsys):
        assert cli.main(["inspect", "--json", "--out", str(tmp_path)]) == cli.EXIT_OK
        printed = capsys.readouterr().out
        for row in ("192x192x64", "96x96x128", "48x48x128", "6, 10, 14, 18, 22"):
            assert row in printed
        report = json.loads((tmp_path / "inspect.json").read_text())
        assert [block["block"] for block in report["blocks"]] == ["HB1", "HB2", "CB2", "CB3"]
        assert report["references"]["full"]["published"] == 9.03e6
        assert 0.25 <= report["small_to_full_ratio"] <= 0.45

    def test_disabling_msa_lowers_total(self):
        full = cli.inspect_report(cli.nb.preset("full"))["total"]
        no_msa = cli.inspect_report(cli.nb.preset("no_msa"))["total"]
        assert no_msa < full


class TestEval:
    def test_perfect_predictions(self, synth, tmp_path):
        preds = tmp_path / "preds"
        preds.mkdir()
        for mask in sorted((synth / "masks").glob("*.pgm")):
            (preds / mask.name).write_bytes(mask.read_bytes())
        reports = tmp_path / "reports"
        code = cli.main(["eval", "--pred-dir", str(preds), "--manifest", str(synth / "manifest.json"),
                         "--out", str(reports)])
        assert code == cli.EXIT_OK
        summary = json.loads((reports / "metrics.json").read_text())
        assert summary["mae"] == 0.0 and summary["n_images"] == 2
        assert summary["f_max"] == pytest.approx(1.0)
        assert (reports / "metrics.csv").read_text().splitlines()[0] == "image,mae,f_max,e_max"

    def test_missing_prediction_is_a_data_error(self, synth, tmp_path):
        preds = tmp_path / "empty"
        preds.mkdir()
        code = cli.main(["eval", "--pred-dir", str(preds), "--manifest", str(synth / "manifest.json"),
                         "--out", str(tmp_path)])
        assert code == cli.EXIT_DATA


class TestTrainInfer:
    @pytest.mark.integration
    def test_train_then_infer_then_eval(self, synth, tiny_config_file, tmp_path):
        run = tmp_path / "run"
        code = cli.main(["train", "--config", str(tiny_config_file), "--manifest", str(synth / "manifest.json"),
                         "--epochs", "1", "--out", str(run), "--seed", "3"])
        assert code == cli.EXIT_OK
        checkpoint = run / "epoch_000.swck"
        assert checkpoint.exists() and (run / "train_log.jsonl").exists()

        preds = tmp_path / "preds"
        args = ["infer", "--checkpoint", str(checkpoint), "--manifest", str(synth / "manifest.json"),
                "--out", str(preds)]
        assert cli.main(args) == cli.EXIT_OK
        outputs = sorted(preds.glob("*.pgm"))
        assert len(outputs) == 2
        first = [p.read_bytes() for p in outputs]
        pixels, _ = read_netpbm(outputs[0])
        assert pixels.shape == (32, 32) and pixels.dtype == np.uint8

        assert cli.main(args) == cli.EXIT_OK
        assert [p.read_bytes() for p in sorted(preds.glob("*.pgm"))] == first

        code = cli.main(["eval", "--pred-dir", str(preds), "--manifest", str(synth / "manifest.json"),
                         "--out", str(tmp_path / "reports")])
        assert code == cli.EXIT_OK

    def test_missing_manifest_file(self, tmp_path):
        assert cli.main(["train", "--manifest", str(tmp_path / "absent.json")]) == cli.EXIT_DATA

    def test_missing_checkpoint(self, synth, tmp_path):
        code = cli.main(["infer", "--checkpoint", str(tmp_path / "none.swck"),
                         "--manifest", str(synth / "manifest.json")])
        assert code == cli.EXIT_DATA

    def test_numerical_failure_exit_code(self, synth, tiny_config_file, mocker):
        mocker.patch.object(cli, "train", side_effect=NumericalError("loss became nan at step 0", 0))
        code = cli.main(["train", "--config", str(tiny_config_file), "--manifest", str(synth / "manifest.json")])
        assert code == cli.EXIT_NUMERICAL


class TestGradcheck:
    def test_losses_scope_passes(self, capsys):
        assert cli.main(["gradcheck", "--scope", "losses"]) == cli.EXIT_OK
        assert "0 failed" in capsys.readouterr().out

    def test_primitives_scope_passes(self, capsys):
        assert cli.main(["gradcheck", "--scope", "primitives"]) == cli.EXIT_OK
        printed = capsys.readouterr().out
        assert "20 checked, 0 failed" in printed
        assert "matmul" in printed

    @pytest.mark.mock
    def test_corrupted_backward_fails(self, mocker, capsys):
        def bad_square(x):
            return te._emit("square", (x,), x.data * x.data, lambda g: (3.0 * g * x.data,))

        mocker.patch.object(te, "square", bad_square)
        assert cli.main(["gradcheck", "--scope", "primitives"]) == cli.EXIT_NUMERICAL
        assert "FAIL" in capsys.readouterr().out


class TestDeterminism:
    @pytest.fixture(autouse=True)
    def clean_env(self, mocker):
        mocker.patch.dict(os.environ, {var: "4" for var in cli.THREAD_VARS})

    def _config(self, tmp_path, payload):
        path = tmp_path / "run.json"
        path.write_text(json.dumps(payload))
        return str(path)

    def test_flag_pins_thread_pools(self, mocker, tmp_path):
        mocker.patch.object(cli, "THREADS_PINNED", True)
        code = cli.main(["synth", "--count", "1", "--resolution", "16", "--out", str(tmp_path / "s"),
                         "--deterministic"])
        assert code == cli.EXIT_OK
        assert all(os.environ[var] == "1" for var in cli.THREAD_VARS)

    def test_config_value_is_honoured(self, mocker, tmp_path, log_dir):
        mocker.patch.object(cli, "THREADS_PINNED", False)
        config = self._config(tmp_path, {"deterministic": True})
        code = cli.main(["synth", "--count", "1", "--out", str(tmp_path / "s"), "--config", config])
        assert code == cli.EXIT_USAGE
        assert "deterministic" in (log_dir / "synth.log").read_text()

    def test_flag_fails_when_pools_already_started(self, mocker, tmp_path):
        mocker.patch.object(cli, "THREADS_PINNED", False)
        code = cli.main(["synth", "--count", "1", "--out", str(tmp_path / "s"), "--deterministic"])
        assert code == cli.EXIT_USAGE
        assert not (tmp_path / "s").exists()

    def test_config_value_with_pinned_pools(self, mocker, tmp_path):
        mocker.patch.object(cli, "THREADS_PINNED", True)
        config = self._config(tmp_path, {"deterministic": True})
        assert cli.main(["synth", "--count", "1", "--resolution", "16", "--out", str(tmp_path / "s"),
                         "--config", config]) == cli.EXIT_OK
        assert os.environ["OMP_NUM_THREADS"] == "1"

    def test_default_leaves_thread_pools_alone(self, mocker, tmp_path):
        mocker.patch.object(cli, "THREADS_PINNED", False)
        mocker.patch.object(cli, "DETERMINISTIC_DEFAULT", False)
        assert cli.main(["synth", "--count", "1", "--resolution", "16", "--out", str(tmp_path / "s")]) == cli.EXIT_OK
        assert os.environ["OMP_NUM_THREADS"] == "4"

    def test_non_boolean_value_rejected(self, tmp_path):
        config = self._config(tmp_path, {"deterministic": "yes"})
        assert cli.main(["synth", "--count", "1", "--out", str(tmp_path / "s"), "--config", config]) == cli.EXIT_USAGE
