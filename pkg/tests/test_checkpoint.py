import struct

import numpy as np
import pytest

from modroute.checkpoint import MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from modroute.exceptions import CheckpointError
from modroute.framework import BrainDecoder
from modroute.optim import OptimizerState
from modroute.synthdata import split
from modroute.training import Trainer


def small_checkpoint(rng):
    state = OptimizerState(lr=1e-3, step=2, steps={"w": 2})
    state.exp_avg["w"] = rng.normal(size=(2, 3))
    state.exp_avg_sq["w"] = rng.random(size=(2, 3))
    return Checkpoint(
        tensors={"w": rng.normal(size=(2, 3)), "b": rng.normal(size=3), "scale": np.array(1.5)},
        optimizer=state,
        schedule={"phase": 1, "step": 2, "total_steps": 10, "initial_loss": 4.25},
        corpus_hash="abc123",
        strategy="soft_merge",
        config={"corpus": {"num_modalities": 3}},
        rng_state={"state": 12345678901234567890123},
    )


def test_round_trip(tmp_path, rng):
    ckpt = small_checkpoint(rng)
    loaded = load_checkpoint(save_checkpoint(ckpt, tmp_path / "a.ckpt"))
    assert set(loaded.tensors) == {"w", "b", "scale"}
    for name, values in ckpt.tensors.items():
        assert loaded.tensors[name].shape == values.shape
        assert loaded.tensors[name].tobytes() == values.tobytes()
    assert loaded.optimizer.exp_avg["w"].tobytes() == ckpt.optimizer.exp_avg["w"].tobytes()
    assert loaded.optimizer.exp_avg_sq["w"].tobytes() == ckpt.optimizer.exp_avg_sq["w"].tobytes()
    assert loaded.optimizer.steps == {"w": 2}
    assert loaded.optimizer.lr == 1e-3
    assert loaded.schedule == ckpt.schedule
    assert loaded.phase == 1
    assert loaded.num_modalities == 3
    assert loaded.corpus_hash == "abc123"
    assert loaded.rng_state == ckpt.rng_state


def test_file_starts_with_magic_and_version(tmp_path, rng):
    data = save_checkpoint(small_checkpoint(rng), tmp_path / "a.ckpt").read_bytes()
    assert data[:4] == MAGIC
    assert struct.unpack("<I", data[4:8])[0] == 1


def test_no_temporary_files_left_behind(tmp_path, rng):
    save_checkpoint(small_checkpoint(rng), tmp_path / "a.ckpt")
    save_checkpoint(small_checkpoint(rng), tmp_path / "a.ckpt")
    leftovers = [p.name for p in tmp_path.iterdir() if p.name not in ("a.ckpt", "a.ckpt.lock")]
    assert leftovers == []


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "none.ckpt")


def test_bad_magic(tmp_path, rng):
    path = save_checkpoint(small_checkpoint(rng), tmp_path / "a.ckpt")
    path.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_unsupported_version(tmp_path, rng):
    path = save_checkpoint(small_checkpoint(rng), tmp_path / "a.ckpt")
    data = path.read_bytes()
    path.write_bytes(data[:4] + struct.pack("<I", 7) + data[8:])
    with pytest.raises(CheckpointError, match="version 7"):
        load_checkpoint(path)


def test_truncated(tmp_path, rng):
    path = save_checkpoint(small_checkpoint(rng), tmp_path / "a.ckpt")
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_trailing_bytes(tmp_path, rng):
    path = save_checkpoint(small_checkpoint(rng), tmp_path / "a.ckpt")
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_model_layout_mismatch(tiny_config):
    with pytest.raises(CheckpointError):
        BrainDecoder.from_state(tiny_config, {"decoder.head.weight": np.zeros((8, 256))})


def test_resume_is_bitwise_identical(tiny_config, tiny_corpus, tmp_path):
    config = tiny_config.with_overrides(["schedule.phase1_steps=10"])
    train, _, _ = split(tiny_corpus)

    straight = Trainer(BrainDecoder(config), config, train, phase=1)
    straight.run()

    first = Trainer(BrainDecoder(config), config, train, phase=1)
    first.run(steps=5)
    path = save_checkpoint(first.to_checkpoint(), tmp_path / "half.ckpt")
    resumed = Trainer.from_checkpoint(load_checkpoint(path), train)
    assert resumed.schedule.step == 5
    resumed.run()

    a, b = straight.model.state_dict(), resumed.model.state_dict()
    assert a.keys() == b.keys()
    for name in a:
        assert a[name].tobytes() == b[name].tobytes(), name
    assert [r.total for r in straight.history[5:]] == [r.total for r in resumed.history]


def test_group_learning_rates_survive_a_round_trip(tmp_path, rng):
    ckpt = small_checkpoint(rng)
    ckpt.optimizer.group_lrs = {"router.": 5e-3, "projectors.": 5e-4}
    loaded = load_checkpoint(save_checkpoint(ckpt, tmp_path / "groups.ckpt"))
    assert loaded.optimizer.group_lrs == {"projectors.": 5e-4, "router.": 5e-3}
    assert loaded.optimizer.lr_for("router.mlp_in.weight") == 5e-3
    assert loaded.optimizer.lr_for("decoder.head.weight") == 1e-3
