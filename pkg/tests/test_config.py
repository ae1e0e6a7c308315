import json
import os

import pytest

from config import env_overrides, load_run_config, log_level_from_env, read_config_file, save_run_config
from exceptions import ValidationError
from models import RunConfig


def write_json(tmp_path, payload, name="config.json"):
    path = os.path.join(tmp_path, name)
    with open(path, "w") as stream:
        json.dump(payload, stream)
    return path


def test_defaults():
    config = load_run_config(environ={})
    assert config == RunConfig()
    assert config.loss_weights.lambda_f == 4.0
    assert config.clip_len_s == 2.0


def test_precedence_file_env_override(tmp_path):
    path = write_json(tmp_path, {"epochs": 5, "batch_size": 8, "learning_rate": 0.01})
    environ = {"MLVTG_EPOCHS": "7", "MLVTG_BATCH_SIZE": "16"}
    config = load_run_config(path, overrides={"epochs": 9, "seed": None}, environ=environ)
    assert (config.epochs, config.batch_size, config.learning_rate, config.seed) == (9, 16, 0.01, 0)


def test_environment_values_are_typed():
    values = env_overrides({"MLVTG_REFINER_FROZEN": "false", "MLVTG_DROPOUT": "0.25", "MLVTG_SSM_MODE": "lti_kernel"})
    assert values == {"refiner_frozen": False, "dropout": 0.25, "ssm_mode": "lti_kernel"}


@pytest.mark.parametrize("key, raw", [("MLVTG_EPOCHS", "many"), ("MLVTG_USE_REFINER", "maybe")])
def test_unreadable_environment_value(key, raw):
    with pytest.raises(ValidationError, match=key):
        env_overrides({key: raw})


def test_unknown_key_is_rejected(tmp_path):
    with pytest.raises(ValidationError, match="colour"):
        load_run_config(write_json(tmp_path, {"colour": "blue"}), environ={})


@pytest.mark.parametrize(
    "values",
    [{"d_model": 0}, {"dropout": 1.0}, {"ssm_mode": "attention"}, {"lambda_f": -1.0}, {"nms_iou": 0.0}],
)
def test_invalid_values_are_rejected(values):
    with pytest.raises(ValidationError):
        RunConfig.from_dict(values)


def test_broken_config_files(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        read_config_file(os.path.join(tmp_path, "absent.json"))
    bad = os.path.join(tmp_path, "bad.json")
    with open(bad, "w") as stream:
        stream.write("{")
    with pytest.raises(ValidationError, match="not valid JSON"):
        read_config_file(bad)
    with pytest.raises(ValidationError, match="JSON object"):
        read_config_file(write_json(tmp_path, [1, 2], "list.json"))


def test_saved_config_reloads_identically(tmp_path):
    config = RunConfig(d_model=8, gate="sigmoid", refiner_residual=False, learning_rate=3e-3)
    path = os.path.join(tmp_path, "run_config.json")
    save_run_config(config, path)
    assert load_run_config(path, environ={}) == config


def test_log_level_from_environment(monkeypatch):
    assert log_level_from_env() == "INFO"
    monkeypatch.setenv("MLVTG_LOG_LEVEL", "debug")
    assert log_level_from_env() == "DEBUG"
