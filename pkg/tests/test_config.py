import json
from pathlib import Path

import pytest

from utils.config import CHI2_3DOF_99, PipelineConfig, TrackerConfig
from utils.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_gate_is_the_99_percent_chi_square_quantile():
    assert CHI2_3DOF_99 == pytest.approx(11.3449, abs=1e-4)
    assert TrackerConfig().gate_chi2 == CHI2_3DOF_99


def test_shipped_pipeline_config_loads():
    config = PipelineConfig.from_json(str(CONFIGS / "pipeline.json"))
    assert config.seed == 7
    assert Path(config.calibration_path).is_file()
    assert Path(config.table_path).is_file()
    assert config.tracker.max_coast_frames == 8


def test_unknown_keys_are_ignored(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seed": 3, "colour": "blue", "tracker": {"max_coast_frames": 12, "extra": 1}}))
    config = PipelineConfig.from_json(str(path))
    assert config.seed == 3
    assert config.tracker.max_coast_frames == 12


def test_out_of_range_value_names_its_key(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"trajectory": {"window": 2}}))
    with pytest.raises(ConfigError, match="trajectory.window"):
        PipelineConfig.from_json(str(path))


def test_wrong_type_is_rejected():
    with pytest.raises(ConfigError, match="seed"):
        PipelineConfig.from_dict({"seed": "seven"})


def test_missing_referenced_file(tmp_path):
    with pytest.raises(ConfigError, match="script_path"):
        PipelineConfig.from_dict({"script_path": str(tmp_path / "absent.json")})


def test_invalid_json(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{ not json")
    with pytest.raises(ConfigError):
        PipelineConfig.from_json(str(path))


def test_toy_cell_must_be_known():
    with pytest.raises(ConfigError, match="toy.cell"):
        PipelineConfig.from_dict({"toy": {"cell": "transformer"}})
