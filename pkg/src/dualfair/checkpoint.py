"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"DFVLCKPT"                       magic, 8 bytes
    u32 version
    u32 block count
    per block:
        u32 name length, name bytes (UTF-8)
        u32 rank, u64 dims[rank]
        f64 values[prod(dims)]        row-major
    32-byte SHA-256 of everything above

Non-tensor state is stored as ordinary blocks: the config text as its UTF-8
byte values under ``meta/config``, the PCG64 state as 32-bit limbs under
``rng/*``, counters as rank-0 blocks.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, TrainConfig
from .errors import IntegrityError, VersionError

MAGIC = b"DFVLCKPT"
VERSION = 1


def write_blocks(path, blocks: dict[str, np.ndarray], version: int = VERSION):
    out = bytearray(MAGIC)
    out += struct.pack("<II", version, len(blocks))
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    out += hashlib.sha256(bytes(out)).digest()
    Path(path).write_bytes(bytes(out))


def read_blocks(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 + 32 or raw[:len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    version, n_blocks = struct.unpack_from("<II", body, len(MAGIC))
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch")
    pos = len(MAGIC) + 8
    blocks = {}
    try:
        for _ in range(n_blocks):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            blocks[name] = arr.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError):
        raise IntegrityError(f"{path}: truncated or malformed block table") from None
    if pos != len(body):
        raise IntegrityError(f"{path}: length mismatch ({len(body) - pos} trailing bytes)")
    return blocks


def _pcg_to_array(state: dict) -> np.ndarray:
    s, inc = state["state"]["state"], state["state"]["inc"]
    limbs = [(v >> (32 * i)) & 0xFFFFFFFF for v in (s, inc) for i in range(4)]
    return np.array(limbs + [state["has_uint32"], state["uinteger"]], dtype=np.float64)


def _array_to_pcg(arr: np.ndarray) -> dict:
    vals = [int(v) for v in arr]
    s = sum(vals[i] << (32 * i) for i in range(4))
    inc = sum(vals[4 + i] << (32 * i) for i in range(4))
    return {"bit_generator": "PCG64", "state": {"state": s, "inc": inc},
            "has_uint32": vals[8], "uinteger": vals[9]}


def _text_to_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _array_to_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def state_blocks(state, include_encoders: bool = True) -> dict[str, np.ndarray]:
    model, opt = state.model, state.opt
    cfg_text = ExperimentConfig(train=state.cfg).to_text()
    blocks = {"meta/config": _text_to_array(cfg_text)}
    for k, p in model.params.items():
        blocks[f"param/{k}"] = p.data
    for k in model.params:
        blocks[f"adam/m/{k}"] = opt.m[k]
        blocks[f"adam/v/{k}"] = opt.v[k]
    blocks["adam/t"] = np.array(float(opt.t))
    blocks["bank/mu"] = model.bank.mu
    blocks["rng/current"] = _pcg_to_array(state.rng.bit_generator.state)
    blocks["rng/epoch_start"] = _pcg_to_array(state.epoch_rng_state)
    blocks["counter/step"] = np.array(float(state.step))
    blocks["counter/epoch"] = np.array(float(state.epoch))
    blocks["counter/batch_in_epoch"] = np.array(float(state.batch_in_epoch))
    if include_encoders:
        for k, t in {**model.vision.named_weights(), **model.text.named_weights()}.items():
            blocks[f"frozen/{k}"] = t.data
    return blocks


def save_checkpoint(state, path):
    write_blocks(path, state_blocks(state))


def load_checkpoint(path):
    """Rebuild a TrainState exactly as it was saved."""
    from .objective import TrainState

    blocks = read_blocks(path)
    cfg = ExperimentConfig.from_text(_array_to_text(blocks["meta/config"]), source=str(path)).train
    state = TrainState(cfg)
    model, opt = state.model, state.opt
    for k, p in model.params.items():
        key = f"param/{k}"
        if key not in blocks or blocks[key].shape != p.data.shape:
            raise IntegrityError(f"{path}: missing or mis-shaped block {key}")
        p.data = blocks[key].copy()
        p.zero_grad()
        opt.m[k] = blocks[f"adam/m/{k}"].copy()
        opt.v[k] = blocks[f"adam/v/{k}"].copy()
    opt.t = int(blocks["adam/t"])
    model.bank.mu = blocks["bank/mu"].copy()
    frozen = {k[len("frozen/"):]: v for k, v in blocks.items() if k.startswith("frozen/")}
    if frozen:
        model.vision.load_weights({k: v for k, v in frozen.items() if k.startswith("vision/")})
        model.text.load_weights({k: v for k, v in frozen.items() if k.startswith("text/")})
    state.rng.bit_generator.state = _array_to_pcg(blocks["rng/current"])
    state.epoch_rng_state = _array_to_pcg(blocks["rng/epoch_start"])
    state.step = int(blocks["counter/step"])
    state.epoch = int(blocks["counter/epoch"])
    state.batch_in_epoch = int(blocks["counter/batch_in_epoch"])
    return state


def config_of(path) -> TrainConfig:
    blocks = read_blocks(path)
    return ExperimentConfig.from_text(_array_to_text(blocks["meta/config"])).train
