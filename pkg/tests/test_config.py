import json

import numpy as np
import pytest

from featlens._io import dump_config_file, kv_loads, load_config_file
from featlens.host import HostConfig
from featlens.lenses import LensInit
from featlens.losses import LossMode
from featlens.train_config import AugPolicy, EvalSpec, ExperimentConfig, SelectMode, TrainConfig


def test_kv_loads():
    text = """
    # run settings
    train.epochs = 2
    train.initial_lr = 0.001   # smaller steps
    train.loss.mode = mse+tac
    host.input_hw = [28, 28]
    lens.init = random
    eval.angle_filter = null
    """
    obj = kv_loads(text)
    assert obj == {
        "train": {"epochs": 2, "initial_lr": 0.001, "loss": {"mode": "mse+tac"}},
        "host": {"input_hw": [28, 28]},
        "lens": {"init": "random"},
        "eval": {"angle_filter": None},
    }


def test_kv_loads_errors():
    with pytest.raises(ValueError, match="line 2"):
        kv_loads("a = 1\njust words\n")
    with pytest.raises(ValueError, match="conflicts"):
        kv_loads("a = 1\na.b = 2\n")


@pytest.mark.parametrize("suffix", [".yaml", ".json", ".conf"])
def test_load_config_file_by_suffix(tmp_path, suffix):
    path = tmp_path / f"run{suffix}"
    if suffix == ".yaml":
        path.write_text("train:\n  epochs: 3\n")
    elif suffix == ".json":
        path.write_text(json.dumps({"train": {"epochs": 3}}))
    else:
        path.write_text("train.epochs = 3\n")
    assert load_config_file(path) == {"train": {"epochs": 3}}


def test_load_config_file_rejects_non_mapping(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ValueError, match="mapping"):
        load_config_file(path)
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_config_file(empty) == {}


def test_dump_config_file(tmp_path):
    obj = {"select": SelectMode.PREDICTED, "input_hw": (16, 16), "path": tmp_path}
    dump_config_file(obj, tmp_path / "out" / "settings.yaml")
    assert load_config_file(tmp_path / "out" / "settings.yaml") == {
        "select": "predicted",
        "input_hw": [16, 16],
        "path": str(tmp_path),
    }
    dump_config_file({"a": [1, 2]}, tmp_path / "settings.json")
    assert json.loads((tmp_path / "settings.json").read_text()) == {"a": [1, 2]}


def test_experiment_config_defaults_round_trip():
    config = ExperimentConfig()
    assert config.aug == AugPolicy.small_dataset()
    assert ExperimentConfig.from_dict(config.to_dict()) == config


def test_experiment_config_from_dict():
    config = ExperimentConfig.from_dict(
        {
            "host": {"input_hw": [16, 16], "stage_widths": [4], "bottleneck_width": 4},
            "lens": {"groups": 2, "init": "random"},
            "train": {"epochs": 0.5, "loss": {"mode": "mae"}},
            "aug": {"preset": "large"},
            "eval": {"select": "none", "transforms": ["rot90"]},
        }
    )
    assert config.host == HostConfig(input_hw=(16, 16), stage_widths=(4,), bottleneck_width=4)
    assert config.lens.groups == 2 and config.lens.init == LensInit.RANDOM
    assert config.train.loss.mode == LossMode.MAE
    assert config.aug == AugPolicy.large_dataset()
    assert config.eval.select == SelectMode.NONE
    assert config.eval.transforms == ("rot90",)
    with pytest.raises(ValueError, match="sections"):
        ExperimentConfig.from_dict({"optimizer": {}})


def test_experiment_config_merge():
    base = ExperimentConfig()
    merged = base.merge({"train": {"batch_size": 8}, "aug": {"none": 0.5, "rot180": 0.5}})
    assert merged.train.batch_size == 8
    assert merged.train.initial_lr == base.train.initial_lr
    assert merged.aug.probabilities == {"none": 0.5, "rot180": 0.5}
    assert base.train.batch_size == 64


def test_experiment_config_with_seed():
    config = ExperimentConfig().with_seed(7)
    assert (config.host.seed, config.lens.seed, config.train.seed) == (7, 7, 7)


def test_experiment_config_from_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("train.max_steps = 2\neval.angle_filter = [45, 315]\n")
    config = ExperimentConfig.from_file(path)
    assert config.train.max_steps == 2
    assert config.eval.angle_filter == (45.0, 315.0)


def test_train_config_merge():
    config = TrainConfig(epochs=2).merge({"loss": {"K": 5}})
    assert config.epochs == 2
    assert config.loss.K == 5
    assert TrainConfig().merge(TrainConfig(batch_size=3)).batch_size == 3


def test_eval_spec():
    spec = EvalSpec.mnist_rot()
    assert spec.keeps([0.0, 44.9, 45.0, 180.0, 315.0, 315.1]).tolist() == [
        False, False, True, True, True, False,
    ]
    wrapping = EvalSpec(angle_filter=(315, 45))
    assert wrapping.keeps(np.array([0.0, 40.0, 90.0, 350.0])).tolist() == [True, True, False, True]
    assert EvalSpec().keeps([10.0, 200.0]).all()

    with pytest.raises(ValueError):
        EvalSpec(angle_filter=(-10, 90))
    with pytest.raises(ValueError):
        EvalSpec(select="guess")
    with pytest.raises(ValueError):
        EvalSpec(transforms=("shear",))

    rot = EvalSpec.exact_rotations(SelectMode.PREDICTED)
    assert [s.angle_deg for s in rot.specs] == [90.0, 180.0, 270.0]
    assert EvalSpec.from_dict(rot.to_dict()) == rot
    assert rot.to_dict()["select"] == "predicted"
