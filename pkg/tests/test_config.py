"""
設定管理のテスト
"""
from pathlib import Path

import pytest
import yaml

from src.config import RunConfig, load_run_config, settings
from src.interp_trainer import ScheduleMode
from src.tensor_core import ConfigError

CONFIG_DIR = Path(__file__).parent.parent / "config"


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return str(path)


# ============== 読み込み ==============

@pytest.mark.parametrize("name", ["run_default.yaml", "run_mixer.yaml", "desk.yaml"])
def test_shipped_configs_are_valid(name):
    config = load_run_config(str(CONFIG_DIR / name))
    assert config.to_train_config().epochs == config.epochs


def test_yaml_keys_accept_dashes(tmp_path):
    path = write_yaml(tmp_path / "run.yaml", {"prior": "mixer", "alpha": 0.005, "batch-size": 64})
    config = load_run_config(path)
    assert (config.prior, config.alpha, config.batch_size) == ("mixer", 0.005, 64)


def test_overrides_win_over_yaml(tmp_path):
    path = write_yaml(tmp_path / "run.yaml", {"alpha": 0.5, "epochs": 7})
    config = load_run_config(path, {"alpha": 0.2, "epochs": None})
    assert config.alpha == 0.2
    assert config.epochs == 7


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError) as excinfo:
        load_run_config(str(tmp_path / "absent.yaml"))
    assert excinfo.value.field_name == "config"


def test_non_mapping_yaml_is_rejected(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="mapping"):
        load_run_config(str(path))


@pytest.mark.parametrize("overrides,field_name", [
    ({"alpha": 1.5}, "alpha"),
    ({"epochs": 0}, "epochs"),
    ({"prior": "resnet"}, "prior"),
    ({"layer_mask": "1,0,2"}, "layer_mask"),
    ({"momentum": 0.9}, "momentum"),
    ({"beta1": 1.0}, "beta1"),
    ({"adam_eps": 0.0}, "adam_eps"),
])
def test_invalid_values_name_the_field(overrides, field_name):
    with pytest.raises(ConfigError) as excinfo:
        load_run_config(overrides=overrides)
    assert excinfo.value.field_name == field_name
    assert str(excinfo.value).startswith(f"{field_name}: ")


# ============== スケジュール選択 ==============

def test_schedule_selection():
    assert RunConfig(alpha=0.5).schedule().mode == ScheduleMode.CONSTANT
    assert RunConfig(no_interp=True, alpha=0.5).schedule().mode == ScheduleMode.NONE
    assert RunConfig(prior="none").schedule().mode == ScheduleMode.NONE
    assert RunConfig(test_time_alpha=0.3).schedule().alpha_test == 0.3
    decay = RunConfig(decay_a=0.5, decay_k=2.0).schedule()
    assert (decay.mode, decay.a, decay.k) == (ScheduleMode.POLY_DECAY, 0.5, 2.0)


def test_layer_mask_is_normalized():
    config = RunConfig(layer_mask=" 1, 0 ,1")
    assert config.layer_mask == "1,0,1"
    assert config.mask() == [True, False, True]
    assert config.schedule().layer_mask == [True, False, True]
    assert RunConfig().mask() is None


def test_to_train_config_maps_names():
    train = RunConfig(lr=3e-4, prior="mixer", subset=500, seed=4).to_train_config()
    assert train.learning_rate == 3e-4
    assert train.prior_kind == "mixer"
    assert (train.subset, train.seed) == (500, 4)


def test_to_train_config_carries_optimizer_and_normalizer_settings():
    train = RunConfig(beta1=0.8, beta2=0.95, adam_eps=1e-6, normalize_eps=1e-4).to_train_config()
    assert (train.beta1, train.beta2, train.adam_eps) == (0.8, 0.95, 1e-6)
    assert train.normalize_eps == 1e-4


def test_environment_defaults_reach_run_config(monkeypatch):
    monkeypatch.setattr(settings.optim, "beta2", 0.98)
    monkeypatch.setattr(settings.data, "normalize_eps", 1e-5)
    config = load_run_config()
    assert (config.beta2, config.normalize_eps) == (0.98, 1e-5)


def test_bias_and_head_blending_is_off_unless_requested():
    assert not RunConfig().to_train_config().interpolate_bias
    train = RunConfig(interpolate_bias=True, interpolate_head=True).to_train_config()
    assert train.interpolate_bias and train.interpolate_head


# ============== ハッシュ ==============

def test_content_hash_is_stable():
    a = RunConfig(alpha=0.5, epochs=10)
    b = RunConfig(epochs=10, alpha=0.5)
    assert a.content_hash() == b.content_hash()
    assert len(a.content_hash()) == 64


def test_content_hash_tracks_hyperparameters_not_data_location():
    base = RunConfig(alpha=0.5)
    assert base.content_hash() != RunConfig(alpha=0.25).content_hash()
    assert base.content_hash() == RunConfig(alpha=0.5, data_dir="/elsewhere").content_hash()
