import numpy as np
import pytest

from transfa import autodiff as ad
from transfa.config import LossWeights, TrainConfig, toy_gradcheck_model
from transfa.data import synth_dataset, synth_group_spec
from transfa.errors import CheckpointError, ContractError, TrainingError
from transfa.model import TransFA
from transfa.trainer import (
    MAGIC,
    OptimizerState,
    checkpoint_entries,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    read_log,
    restore,
    save_checkpoint,
    sgd_step,
    train,
)

CFG = TrainConfig(base_lr=0.01, lr_decay_epochs=2, epochs=3, batch_size=4, seed=5)


def tiny():
    manifest = synth_dataset(3, 3, 4, seed=1, image_size=16)
    model = TransFA.create(toy_gradcheck_model(3), synth_group_spec(4), seed=2)
    return model, manifest


def test_sgd_momentum_hand_values():
    p = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    state = OptimizerState.zeros_like({"w": p}, momentum=0.5, lr=0.1)
    p.grad = np.array([1.0, -1.0])
    sgd_step({"w": p}, state)
    np.testing.assert_allclose(p.data, [0.9, 2.1])
    sgd_step({"w": p}, state)  # v = 0.5 * v + g = [1.5, -1.5]
    np.testing.assert_allclose(p.data, [0.75, 2.25])
    np.testing.assert_allclose(state.velocities["w"], [1.5, -1.5])


def test_sgd_scalar_recursion():
    p = ad.Tensor(np.array(1.0), requires_grad=True)
    state = OptimizerState.zeros_like({"p": p}, momentum=0.9, lr=0.1)
    p.grad = np.array(1.0)
    sgd_step({"p": p}, state)
    assert p.data == pytest.approx(0.9) and state.velocities["p"] == pytest.approx(1.0)
    sgd_step({"p": p}, state)
    assert p.data == pytest.approx(0.71) and state.velocities["p"] == pytest.approx(1.9)


def test_sgd_boundaries():
    p = ad.Tensor(np.array([0.5, -2.0]), requires_grad=True)
    state = OptimizerState.zeros_like({"p": p}, momentum=0.9, lr=0.1)
    p.grad = np.zeros(2)
    sgd_step({"p": p}, state)
    np.testing.assert_array_equal(p.data, [0.5, -2.0])
    vanilla = OptimizerState.zeros_like({"p": p}, momentum=0.0, lr=0.1)
    for g in ([1.0, 2.0], [3.0, -1.0]):
        before = p.data.copy()
        p.grad = np.array(g)
        sgd_step({"p": p}, vanilla)
        np.testing.assert_allclose(p.data, before - 0.1 * np.array(g))


def test_sgd_needs_gradients():
    p = ad.Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ContractError):
        sgd_step({"w": p}, OptimizerState.zeros_like({"w": p}))


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    model, _ = tiny()
    opt = OptimizerState.zeros_like(model.params, lr=0.003)
    entries = checkpoint_entries(model, opt, epoch=4, step=17, seed=9)
    save_checkpoint(entries, tmp_path / "c.bin")
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.keys() == entries.keys()
    for k in entries:
        assert back[k].tobytes() == np.asarray(entries[k], dtype=np.float64).tobytes()
        assert back[k].shape == np.shape(entries[k])
    assert encode_checkpoint(back) == (tmp_path / "c.bin").read_bytes()

    other = TransFA.create(model.cfg, model.spec, seed=99)
    meta = restore(other, back)
    assert meta == {"epoch": 4.0, "step": 17.0, "seed": 9.0, "lr": 0.003}
    for k, v in model.state().items():
        assert other.state()[k].tobytes() == v.tobytes()


def test_checkpoint_corruption_is_detected():
    blob = bytearray(encode_checkpoint({"a": np.arange(6.0).reshape(2, 3), "b": np.array(1.5)}))
    assert blob.startswith(MAGIC)
    flipped = bytearray(blob)
    flipped[20] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(bytes(flipped))
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(bytes(blob[:30]))
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(b"TRANSFA9" + bytes(blob[8:]))
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"NOTACKPT" + bytes(blob[8:]))


def test_restore_rejects_mismatched_model():
    model, _ = tiny()
    entries = checkpoint_entries(model)
    bigger = TransFA.create(toy_gradcheck_model(5), model.spec)
    with pytest.raises(CheckpointError, match="shape"):
        restore(bigger, entries)
    del entries["param.identity.fc.bias"]
    with pytest.raises(CheckpointError, match="lacks"):
        restore(model, entries)


def test_zero_epochs_leaves_initialisation():
    model, manifest = tiny()
    before = {k: v.copy() for k, v in model.state().items()}
    result = train(model, manifest, TrainConfig(epochs=0), LossWeights())
    assert result.log == []
    for k, v in model.state().items():
        assert v.tobytes() == before[k].tobytes()


def test_training_is_deterministic():
    logs = []
    for _ in range(2):
        model, manifest = tiny()
        logs.append(train(model, manifest, CFG, LossWeights()).log)
    assert logs[0] == logs[1]
    # 9 samples in batches of 4: the trailing singleton is dropped
    assert [r["lr"] for r in logs[0]] == [0.01] * 4 + [0.001] * 2


def test_resume_reproduces_uninterrupted_log(tmp_path):
    model, manifest = tiny()
    full = train(model, manifest, CFG, LossWeights(), out_dir=tmp_path / "full")

    model, manifest = tiny()
    half = TrainConfig(**{**CFG.__dict__, "epochs": 2})
    train(model, manifest, half, LossWeights(), out_dir=tmp_path / "part")
    ckpt = load_checkpoint(tmp_path / "part" / "checkpoint_epoch002.bin")
    fresh = TransFA.create(model.cfg, model.spec, seed=123)
    train(fresh, manifest, CFG, LossWeights(), out_dir=tmp_path / "part", resume=ckpt)

    assert read_log(tmp_path / "part" / "train_log.csv") == full.log
    assert read_log(tmp_path / "full" / "train_log.csv") == full.log
    final = load_checkpoint(tmp_path / "part" / "checkpoint_last.bin")
    for k, v in full.checkpoint.items():
        assert final[k].tobytes() == np.asarray(v, dtype=np.float64).tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_raises():
    model, manifest = tiny()
    model.params["heads.region0.fc3.bias"].data[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(model, manifest, CFG, LossWeights())
    model, manifest = tiny()
    model.params["identity.fc.bias"].data[:] = np.inf
    with pytest.raises(TrainingError, match="loss_F"):
        train(model, manifest, CFG, LossWeights())


def test_training_contracts():
    model, manifest = tiny()
    with pytest.raises(ContractError):
        train(model, manifest, CFG, LossWeights(), split="val")
    small = TransFA.create(toy_gradcheck_model(2), model.spec)
    with pytest.raises(ContractError):
        train(small, manifest, CFG, LossWeights())


def test_loss_decreases_on_tiny_set():
    model, manifest = tiny()
    log = train(model, manifest, TrainConfig(base_lr=0.003, epochs=15, batch_size=9, seed=0), LossWeights()).log
    assert log[-1]["loss_total"] < log[0]["loss_total"]
