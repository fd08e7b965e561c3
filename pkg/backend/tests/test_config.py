import json

import pytest
from pydantic import ValidationError

from app.config import ExperimentConfig
from app.dit import count_parameters

from tests.factories import tiny_experiment, tiny_synth


def test_unknown_keys_are_rejected(tmp_path):
    path = tmp_path / "config.json"
    data = json.loads(tiny_experiment().model_dump_json())
    data["dit"]["model_dimension"] = 32
    path.write_text(json.dumps(data))
    with pytest.raises(ValidationError):
        ExperimentConfig.load(path)


def test_only_schema_version_one_is_accepted():
    with pytest.raises(ValidationError):
        ExperimentConfig(schema_version=2)


def test_save_load_preserves_the_hash(tmp_path):
    config = tiny_experiment()
    loaded = ExperimentConfig.load(config.save(tmp_path / "config.json"))
    assert loaded == config
    assert loaded.config_hash == config.config_hash


def test_hashes_ignore_output_dir_and_data_hash_ignores_training():
    base = tiny_experiment()
    moved = tiny_experiment(output_dir="elsewhere")
    assert moved.config_hash == base.config_hash

    longer = base.with_steps(50)
    assert longer.config_hash != base.config_hash
    assert longer.data_hash == base.data_hash

    reseeded = tiny_experiment(synth=tiny_synth(seed=9))
    assert reseeded.data_hash != base.data_hash


def test_with_steps_keeps_schedules_consistent():
    config = tiny_experiment().with_steps(3)
    assert config.train.schedule.total_steps == 3
    assert config.train.schedule.warmup_steps < 3
    assert config.consistency.schedule.total_steps == 3


def test_cross_module_shapes_are_validated():
    with pytest.raises(ValidationError):
        tiny_experiment(synth=tiny_synth(latent_channels=6))
    with pytest.raises(ValidationError):
        tiny_experiment(seeds=[])


def test_artifact_meta_carries_both_hashes():
    config = tiny_experiment()
    meta = config.artifact_meta(seed=3)
    assert meta["config_hash"] == config.config_hash
    assert meta["data_hash"] == config.data_hash
    assert meta["seed"] == 3


def test_full_scale_config_builds_a_reference_sized_dit():
    config = ExperimentConfig.full_scale()
    assert config.dit.model_dim == 1024
    assert 2.2e8 <= count_parameters(config.dit) <= 3.4e8
    assert config.evaluation.reference_size == 5000
