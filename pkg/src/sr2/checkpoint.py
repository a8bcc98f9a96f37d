"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"SR2CKPT\\n"  u16 major  u16 minor
    u32 len + JSON header   (tool version, run config, config hash, model/schedule configs)
    u32 count + arrays      (model parameters)
    u32 len + JSON state    (epoch, optimizer step counts, data RNG state)
    u32 count + arrays      (optimizer first/second moments)

An array is ``u16 name_len, name, u8 dtype code, u8 ndim, u32 shape[ndim], raw data``.
Files with a different major version are refused rather than reinterpreted.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict

import numpy as np

from . import __version__
from . import config as config_mod
from .baselines import build_baseline
from .engine import AdamAtan2, Model, TrainState

MAGIC = b"SR2CKPT\n"
VERSION = (1, 0)
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _write_json(buf, obj) -> None:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_json(buf):
    (n,) = struct.unpack("<I", _read(buf, 4))
    return json.loads(_read(buf, n).decode())


def _read(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint is truncated")
    return data


def _write_arrays(buf, arrays: list[tuple[str, np.ndarray]]) -> None:
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def _read_arrays(buf) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read(buf, 4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read(buf, 2))
        name = _read(buf, nlen).decode()
        code, ndim = struct.unpack("<BB", _read(buf, 2))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
        dt = _DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        out[name] = np.frombuffer(_read(buf, size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return out


def to_bytes(model: Model, state: TrainState | None, cfg: config_mod.RunConfig) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HH", *VERSION))
    _write_json(buf, {
        "tool": __version__,
        "config": cfg.to_flat(),
        "config_hash": cfg.hash(),
        "kind": model.kind,
        "model_config": model.config.to_dict(),
        "sr2": asdict(model.schedule.sr2),
    })
    _write_arrays(buf, [(n, t.data) for n, t in model.named_parameters()])
    if state is None:
        _write_json(buf, None)
        _write_arrays(buf, [])
    else:
        opt = state.optimizer
        _write_json(buf, {
            "epoch": state.epoch,
            "step": opt.step_count,
            "param_steps": opt.steps,
            "lr": opt.lr,
            "betas": [opt.beta1, opt.beta2],
            "rng": state.rng.bit_generator.state,
        })
        moments = [(f"m.{n}", opt.m[n]) for n, _ in opt.params] + [(f"v.{n}", opt.v[n]) for n, _ in opt.params]
        _write_arrays(buf, moments)
    return buf.getvalue()


def save(path, model: Model, state: TrainState | None, cfg: config_mod.RunConfig) -> None:
    data = to_bytes(model, state, cfg)
    with open(path, "wb") as fh:
        fh.write(data)


def load(path):
    """Returns (run config, model, train state or None)."""
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    if buf.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not an sr2 checkpoint")
    major, minor = struct.unpack("<HH", _read(buf, 4))
    if major != VERSION[0]:
        raise CheckpointError(f"{path}: checkpoint format {major}.{minor} is not supported "
                              f"(this tool reads {VERSION[0]}.x); refusing to migrate")
    header = _read_json(buf)
    cfg = config_mod.from_flat(header["config"])
    if cfg.hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch; the header was altered or is corrupt")
    model = build_baseline(cfg.baseline_spec(), cfg.model_config(), cfg.sr2_config(), seed=cfg.run.seed)
    params = _read_arrays(buf)
    named = dict(model.named_parameters())
    if set(params) != set(named):
        raise CheckpointError(f"{path}: parameter names do not match the configured model")
    for name, t in named.items():
        if params[name].shape != t.data.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        t.data = params[name].astype(t.data.dtype)
    meta = _read_json(buf)
    moments = _read_arrays(buf)
    state = None
    if meta is not None:
        opt = AdamAtan2(model.named_parameters(), meta["lr"], *meta["betas"])
        opt.step_count = meta["step"]
        opt.steps = {k: int(v) for k, v in meta["param_steps"].items()}
        for n, _ in opt.params:
            opt.m[n] = moments[f"m.{n}"]
            opt.v[n] = moments[f"v.{n}"]
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = meta["rng"]
        state = TrainState(opt, rng, meta["epoch"])
    return cfg, model, state
