#!/usr/bin/env python3
"""
Run Configuration Tests
=======================

Defaults, JSON file merging, flag precedence and validation.
"""

import json
import pathlib
import sys

import pytest

# Add the scripts directory to path
sys.path.insert(0, str(pathlib.Path(__file__).parent.parent / "scripts"))

from network_blocks import ConfigError
from run_config import RunConfig, merge, resolve_config


class TestDefaults:
    def test_training_defaults(self):
        config = resolve_config()
        assert config.optimizer.lr == 0.001
        assert (config.optimizer.beta1, config.optimizer.beta2, config.optimizer.epsilon) == (0.9, 0.999, 1e-8)
        assert config.schedule.lr_drop_factor == 0.1
        assert config.schedule.lr_drop_epoch == 30
        assert config.schedule.epochs == 41
        assert config.data.batch_size == 6
        assert config.schedule.stats_refresh_batches == 16

    def test_loss_and_eval_defaults(self):
        config = resolve_config()
        assert config.loss.alpha_window == 31
        assert config.loss.normalization == "alpha_sum"
        assert config.eval.beta_squared == 0.3
        assert config.eval.e_measure == "max"

    def test_json_echo_is_canonical(self):
        payload = json.loads(RunConfig().to_json())
        assert payload["optimizer"]["lr"] == 0.001
        assert payload["network"]["dilation_schedule"]["HB1"] == [6, 10, 14, 18, 22]


class TestMerge:
    def write(self, tmp_path, payload):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(payload))
        return str(path)

    def test_file_values_are_applied(self, tmp_path):
        path = self.write(tmp_path, {"optimizer": {"lr": 0.01}, "network": {"preset": "toy"}})
        config = resolve_config(path)
        assert config.optimizer.lr == 0.01
        assert config.optimizer.beta1 == 0.9
        assert config.network.base_channels == 8
        assert config.network.input_resolution == 96

    def test_flags_override_file(self, tmp_path):
        path = self.write(tmp_path, {"optimizer": {"lr": 0.01}, "schedule": {"epochs": 5}})
        config = resolve_config(path, {"optimizer": {"lr": 0.005}})
        assert config.optimizer.lr == 0.005
        assert config.schedule.epochs == 5

    def test_preset_then_field_override(self):
        config = merge(RunConfig(), {"network": {"preset": "small", "enable_msa": False}})
        assert config.network.variant == "small"
        assert config.network.enable_msa is False

    @pytest.mark.parametrize("payload", [
        {"optimiser": {}},
        {"optimizer": {"momentum": 0.9}},
        {"network": {"depth": 3}},
        {"data": {"eval_manifest": "eval.json"}},
    ])
    def test_unknown_keys_rejected(self, payload):
        with pytest.raises(ConfigError, match="unknown"):
            merge(RunConfig(), payload)

    def test_missing_and_malformed_files(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            resolve_config(str(tmp_path / "absent.json"))
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            resolve_config(str(bad))


class TestValidation:
    @pytest.mark.parametrize("overrides, fragment", [
        ({"optimizer": {"lr": 0}}, "optimizer.lr"),
        ({"optimizer": {"kind": "sgd"}}, "optimizer.kind"),
        ({"schedule": {"epochs": 0}}, "schedule.epochs"),
        ({"schedule": {"lr_drop_factor": 2.0}}, "schedule.lr_drop_factor"),
        ({"data": {"batch_size": 0}}, "data.batch_size"),
        ({"loss": {"alpha_window": 30}}, "alpha_window"),
        ({"eval": {"e_measure": "mean"}}, "eval.e_measure"),
        ({"network": {"groupnorm_groups": 5}}, "groupnorm_groups"),
        ({"deterministic": "yes"}, "deterministic"),
        ({"schedule": {"stats_refresh_batches": -1}}, "schedule.stats_refresh_batches"),
    ])
    def test_violated_field_is_named(self, overrides, fragment):
        with pytest.raises(ConfigError, match=fragment):
            resolve_config(overrides=overrides)
