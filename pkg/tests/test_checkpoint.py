import struct

import numpy as np
import pytest

from dualfair.checkpoint import (MAGIC, VERSION, config_of, load_checkpoint, read_blocks, save_checkpoint,
                                 write_blocks)
from dualfair.config import TrainConfig
from dualfair.datagen import DataSpec, generate
from dualfair.errors import IntegrityError, VersionError
from dualfair.objective import TrainState, format_log, total_loss, train

DATA = generate(DataSpec(n=40, seed=6))
CFG = TrainConfig(epochs=2, batch_size=16, seed=3)


def test_block_roundtrip(tmp_path):
    blocks = {"a": np.arange(6.0).reshape(2, 3), "s": np.array(2.5), "z/ü": np.array([np.pi, -0.0, 1e-300])}
    p = tmp_path / "b.bin"
    write_blocks(p, blocks)
    raw = p.read_bytes()
    assert raw[:8] == MAGIC and struct.unpack_from("<I", raw, 8)[0] == VERSION
    back = read_blocks(p)
    assert list(back) == list(blocks)
    for k in blocks:
        assert back[k].shape == blocks[k].shape and back[k].tobytes() == np.asarray(blocks[k], "<f8").tobytes()


def test_corruption_detected(tmp_path):
    p = tmp_path / "b.bin"
    write_blocks(p, {"a": np.ones(4)})
    raw = bytearray(p.read_bytes())
    raw[30] ^= 1
    p.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError, match="checksum"):
        read_blocks(p)
    p.write_bytes(bytes(raw[:20]))
    with pytest.raises(IntegrityError):
        read_blocks(p)
    p.write_bytes(b"garbage" * 10)
    with pytest.raises(IntegrityError):
        read_blocks(p)


def test_version_rejected(tmp_path):
    p = tmp_path / "v.bin"
    write_blocks(p, {"a": np.ones(1)}, version=VERSION + 1)
    with pytest.raises(VersionError, match="version 2"):
        read_blocks(p)


def test_state_roundtrip_loss_bitwise(tmp_path):
    st = TrainState(CFG)
    train(st, DATA, epochs=1)
    p = tmp_path / "s.bin"
    save_checkpoint(st, p)
    back = load_checkpoint(p)
    assert config_of(p) == CFG
    x, y, a = DATA.patches[:5], DATA.y[:5], DATA.a[:5]
    assert total_loss(st.model, x, y, a).total.data.tobytes() == total_loss(back.model, x, y, a).total.data.tobytes()
    assert np.array_equal(st.model.bank.mu, back.model.bank.mu)
    assert st.rng.bit_generator.state == back.rng.bit_generator.state


def test_mid_epoch_resume_matches_uninterrupted(tmp_path):
    full = TrainState(CFG)
    ref = [format_log(r) for r in train(full, DATA)]
    part = TrainState(CFG)
    head = [format_log(r) for r in train(part, DATA, stop_at_step=4)]   # 3 batches/epoch: stops mid-epoch 2
    assert part.batch_in_epoch == 1
    p = tmp_path / "mid.bin"
    save_checkpoint(part, p)
    resumed = load_checkpoint(p)
    tail = [format_log(r) for r in train(resumed, DATA)]
    assert head + tail == ref
