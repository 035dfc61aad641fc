"""Checkpoint format: canonical bytes, corruption detection, restore contract."""

import struct
import zlib

import numpy as np
import pytest

from res3atn.checkpoint import (
    CheckpointFormatError,
    checkpoint_meta,
    load_state,
    network_state,
    restore_network,
    restore_optimizer,
    save_checkpoint,
    save_state,
)
from res3atn.network import NetworkSpec, build_res3atn
from res3atn.optim import NesterovSGD
from res3atn.tensor import Tape, Tensor, backward
from res3atn.ops import softmax_cross_entropy

SPEC = NetworkSpec(
    num_classes=4, input_frames=8, input_size=16, input_channels=1,
    channel_scale=64,
)


def _state():
    return {
        "b.vec": np.arange(3, dtype=np.float32),
        "a.mat": np.arange(6, dtype=np.float32).reshape(2, 3),
        "c.cube": np.ones((2, 2, 2), dtype=np.float32),
    }


def _trained_net(steps=2, seed=0):
    net = build_res3atn(SPEC, seed=seed)
    opt = NesterovSGD(net.parameters())
    rng = np.random.default_rng(5)
    net.train()
    for _ in range(steps):
        x = Tensor(rng.standard_normal((2, 1, 8, 16, 16)).astype(np.float32))
        y = rng.integers(0, 4, size=2)
        with Tape():
            loss = softmax_cross_entropy(net(x), y)
        backward(loss)
        opt.step()
    return net, opt


# ---------------------------------------------------------------------------
# raw state files


def test_state_round_trip(tmp_path):
    path = tmp_path / "s.r3ck"
    save_state(path, _state())
    loaded = load_state(path)
    assert sorted(loaded) == ["a.mat", "b.vec", "c.cube"]
    for name, arr in _state().items():
        np.testing.assert_array_equal(loaded[name], arr)

    again = tmp_path / "s2.r3ck"
    save_state(again, loaded)
    assert again.read_bytes() == path.read_bytes()


def test_insertion_order_does_not_change_bytes(tmp_path):
    state = _state()
    reversed_state = dict(reversed(list(state.items())))
    save_state(tmp_path / "a.r3ck", state)
    save_state(tmp_path / "b.r3ck", reversed_state)
    assert (tmp_path / "a.r3ck").read_bytes() == (tmp_path / "b.r3ck").read_bytes()


def test_rank_zero_entries_are_rejected(tmp_path):
    with pytest.raises(ValueError, match="unsupported rank"):
        save_state(tmp_path / "x.r3ck", {"scalar": np.float32(1.0)})


def _recrc(body_no_crc: bytes) -> bytes:
    return body_no_crc + struct.pack("<I", zlib.crc32(body_no_crc) & 0xFFFFFFFF)


def test_corruption_is_detected(tmp_path):
    path = tmp_path / "s.r3ck"
    save_state(path, _state())
    raw = path.read_bytes()
    body = raw[:-4]
    bad = tmp_path / "bad.r3ck"

    bad.write_bytes(_recrc(b"NOPE" + body[4:]))
    with pytest.raises(CheckpointFormatError, match="bad magic"):
        load_state(bad)

    bumped = bytearray(body)
    bumped[4] = 9
    bad.write_bytes(_recrc(bytes(bumped)))
    with pytest.raises(CheckpointFormatError, match="unsupported version"):
        load_state(bad)

    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0xFF
    bad.write_bytes(bytes(flipped))
    with pytest.raises(CheckpointFormatError, match="CRC mismatch"):
        load_state(bad)

    bad.write_bytes(raw[:6])
    with pytest.raises(CheckpointFormatError, match="file too small"):
        load_state(bad)

    bad.write_bytes(_recrc(body[:-2]))
    with pytest.raises(CheckpointFormatError, match="truncated at byte"):
        load_state(bad)

    bad.write_bytes(_recrc(body + b"JUNK"))
    with pytest.raises(CheckpointFormatError, match="unexpected trailing bytes"):
        load_state(bad)


def test_duplicate_entries_are_rejected(tmp_path):
    path = tmp_path / "one.r3ck"
    save_state(path, {"only": np.ones(2, dtype=np.float32)})
    body = path.read_bytes()[:-4]
    head = struct.Struct("<4sHI")
    magic, version, count = head.unpack(body[: head.size])
    entry = body[head.size :]
    doubled = head.pack(magic, version, 2) + entry + entry
    bad = tmp_path / "dup.r3ck"
    bad.write_bytes(_recrc(doubled))
    with pytest.raises(CheckpointFormatError, match="duplicate entry"):
        load_state(bad)


# ---------------------------------------------------------------------------
# network checkpoints


def test_checkpoint_restores_bitwise_identical_forward(tmp_path):
    net, opt = _trained_net()
    config = {"run": {"seed": 0}}
    path = tmp_path / "net.r3ck"
    save_checkpoint(path, net, optimizer=opt, epoch=7, run_config=config)

    state = load_state(path)
    epoch, meta_config = checkpoint_meta(state)
    assert epoch == 7
    assert meta_config == config

    fresh = build_res3atn(SPEC, seed=99)
    restore_network(fresh, state)
    x = Tensor(np.random.default_rng(8).standard_normal(
        (2, 1, 8, 16, 16)).astype(np.float32))
    net.eval()
    fresh.eval()
    assert np.array_equal(net(x).data, fresh(x).data)


def test_checkpoint_save_is_canonical(tmp_path):
    net, opt = _trained_net()
    save_checkpoint(tmp_path / "a.r3ck", net, optimizer=opt, epoch=1)
    save_checkpoint(tmp_path / "b.r3ck", net, optimizer=opt, epoch=1)
    assert (tmp_path / "a.r3ck").read_bytes() == (tmp_path / "b.r3ck").read_bytes()


def test_restore_reports_every_mismatch_and_changes_nothing(tmp_path):
    net, _ = _trained_net()
    state = dict(network_state(net))
    first = sorted(state)[0]
    state.pop(first)
    state["ghost.weight"] = np.zeros(3, dtype=np.float32)
    second = sorted(state)[1]
    state[second] = state[second].reshape(-1)[: state[second].size].copy().reshape(
        state[second].shape[::-1]
    ) if state[second].ndim > 1 else np.concatenate([state[second], state[second]])

    target = build_res3atn(SPEC, seed=123)
    before = {n: p.data.copy() for n, p in target.named_parameters()}
    with pytest.raises(ValueError) as err:
        restore_network(target, state)
    message = str(err.value)
    assert "missing" in message and first in message
    assert "unexpected" in message and "ghost.weight" in message
    assert "shape mismatch" in message and second in message
    for n, p in target.named_parameters():
        assert np.array_equal(p.data, before[n])


def test_restore_optimizer_velocities(tmp_path):
    net, opt = _trained_net()
    path = tmp_path / "net.r3ck"
    save_checkpoint(path, net, optimizer=opt, epoch=2)

    fresh_net = build_res3atn(SPEC, seed=0)
    fresh_opt = NesterovSGD(fresh_net.parameters())
    assert all(not v.any() for v in fresh_opt.velocities.values())
    restore_optimizer(fresh_opt, load_state(path))
    for name, v in opt.velocities.items():
        np.testing.assert_array_equal(fresh_opt.velocities[name], v)
    assert any(v.any() for v in fresh_opt.velocities.values())


def test_checkpoint_without_config_yields_none(tmp_path):
    net, _ = _trained_net(steps=1)
    path = tmp_path / "bare.r3ck"
    save_checkpoint(path, net)
    epoch, config = checkpoint_meta(load_state(path))
    assert epoch == 0
    assert config is None
