import numpy as np
import pytest

from config.settings import ModelConfig
from core.detnet import Detector
from core.errors import CheckpointError
from core.optimizer import AdamState
from core.persistence import TrainingLog, ensure_config_matches, load_checkpoint, save_checkpoint
from core.training import train_step


def tiny_config(**overrides) -> ModelConfig:
    return ModelConfig(width=0.125, input_size=64, dyhead_blocks=1, **overrides)


def trained_model():
    model = Detector(tiny_config(), seed=2)
    state = AdamState(lr=1e-3)
    images = np.random.default_rng(0).random((1, 1, 64, 64)).astype(np.float32)
    train_step(model, state, images, [np.array([[0, 0.5, 0.5, 0.1, 0.1]])])
    return model, state


def test_round_trip_is_bit_exact(tmp_path):
    model, state = trained_model()
    path = save_checkpoint(tmp_path / "model.ckpt", model, state, extra={"epoch": 4})
    loaded = load_checkpoint(path)
    assert loaded.step == state.step == 1
    assert loaded.extra == {"epoch": 4}
    original = model.parameters()
    for name, tensor in loaded.model.parameters().items():
        assert tensor.data.dtype == original[name].data.dtype
        assert np.array_equal(tensor.data, original[name].data)
    assert set(loaded.state.m) == set(state.m)
    assert all(np.array_equal(loaded.state.v[name], state.v[name]) for name in state.v)


def test_loaded_model_predicts_identically(tmp_path):
    model, state = trained_model()
    loaded = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", model, state))
    x = np.random.default_rng(5).random((2, 1, 64, 64)).astype(np.float32)
    for a, b in zip(model.predict(x), loaded.model.predict(x)):
        assert np.array_equal(a, b)


def test_checkpoint_without_optimizer(tmp_path):
    model = Detector(tiny_config())
    loaded = load_checkpoint(save_checkpoint(tmp_path / "bare.ckpt", model, step=7))
    assert loaded.state is None
    assert loaded.step == 7


def test_truncated_file_reports_offset(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", Detector(tiny_config()))
    payload = path.read_bytes()
    path.write_bytes(payload[: len(payload) - 10])
    with pytest.raises(CheckpointError) as excinfo:
        load_checkpoint(path)
    assert excinfo.value.offset is not None
    assert "offset" in str(excinfo.value)


def test_bad_magic_and_version(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", Detector(tiny_config()))
    payload = bytearray(path.read_bytes())
    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + bytes(payload[8:]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "magic.ckpt")
    payload[8:12] = (99).to_bytes(4, "little")
    (tmp_path / "version.ckpt").write_bytes(bytes(payload))
    with pytest.raises(CheckpointError) as excinfo:
        load_checkpoint(tmp_path / "version.ckpt")
    assert "version 99" in str(excinfo.value)


def test_missing_file_is_a_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_config_mismatch_is_rejected(tmp_path):
    loaded = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", Detector(tiny_config())))
    ensure_config_matches(loaded, tiny_config())
    with pytest.raises(CheckpointError) as excinfo:
        ensure_config_matches(loaded, tiny_config(use_msfa=False))
    assert "use_msfa" in str(excinfo.value)


def test_training_log_records_epochs(tmp_path):
    log = TrainingLog(tmp_path)
    log.start(seed=0)
    log.log_epoch(epoch=1, loss=0.5)
    log.log_event("checkpoint saved")
    log.log_epoch(epoch=2, loss=0.25)
    log.finish(best=0.25)
    epochs = log.epochs()
    assert [row["epoch"] for row in epochs] == ["1", "2"]
    assert epochs[1]["loss"] == "0.25"
