"""The shared transformer block, input embedding, fusion and prediction head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    seq_len: int = 16
    vocab_in: int = 5
    vocab_out: int = 5
    mlp_mult: int = 4
    init_scale: float = 1.0

    def __post_init__(self):
        for name in ("d_model", "n_heads", "seq_len", "vocab_in", "vocab_out", "mlp_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


class ParamSet:
    """Named collection of parameter tensors in a fixed order."""

    names: tuple[str, ...] = ()

    def tensors(self) -> list[Tensor]:
        return [getattr(self, n) for n in self.names]

    def items(self):
        return [(n, getattr(self, n)) for n in self.names]

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors())


class BlockParams(ParamSet):
    names = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "g_attn", "g_mlp")

    def __init__(self, **arrays: np.ndarray):
        for n in self.names:
            setattr(self, n, Tensor(arrays[n], requires_grad=True))

    @staticmethod
    def shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        d, h = cfg.d_model, cfg.mlp_mult * cfg.d_model
        return {
            "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "w1": (d, h), "b1": (h,), "w2": (h, d), "b2": (d,),
            "g_attn": (d,), "g_mlp": (d,),
        }

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> BlockParams:
        std = cfg.init_scale / np.sqrt(cfg.d_model)
        arrays = {}
        for name, shape in cls.shapes(cfg).items():
            if name.startswith("g_"):
                arrays[name] = np.ones(shape, dtype=dtype)
            elif name.startswith("b"):
                arrays[name] = np.zeros(shape, dtype=dtype)
            else:
                arrays[name] = truncated_normal(rng, shape, std).astype(dtype)
        return cls(**arrays)

    @staticmethod
    def count_for(cfg: ModelConfig) -> int:
        return int(sum(np.prod(s) for s in BlockParams.shapes(cfg).values()))


class IOParams(ParamSet):
    names = ("tok_emb", "pos_emb", "w_head", "b_head")

    def __init__(self, **arrays: np.ndarray):
        for n in self.names:
            setattr(self, n, Tensor(arrays[n], requires_grad=True))

    @staticmethod
    def shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        return {
            "tok_emb": (cfg.vocab_in, cfg.d_model),
            "pos_emb": (cfg.seq_len, cfg.d_model),
            "w_head": (cfg.d_model, cfg.vocab_out),
            "b_head": (cfg.vocab_out,),
        }

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> IOParams:
        std = cfg.init_scale / np.sqrt(cfg.d_model)
        arrays = {}
        for name, shape in cls.shapes(cfg).items():
            if name == "b_head":
                arrays[name] = np.zeros(shape, dtype=dtype)
            else:
                arrays[name] = truncated_normal(rng, shape, std).astype(dtype)
        return cls(**arrays)

    @staticmethod
    def count_for(cfg: ModelConfig) -> int:
        return int(sum(np.prod(s) for s in IOParams.shapes(cfg).values()))


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal samples with |x| <= bound*std, by resampling the tails."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def attention(x: Tensor, p: BlockParams, n_heads: int) -> Tensor:
    b, s, d = x.shape
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(b, s, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(x @ p.wq)
    k = heads(x @ p.wk)
    v = heads(x @ p.wv)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    att = ad.softmax(scores, axis=-1)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
    return out @ p.wo


def mlp(x: Tensor, p: BlockParams) -> Tensor:
    return ad.gelu(x @ p.w1 + p.b1) @ p.w2 + p.b2


def block_forward(h: Tensor, p: BlockParams, n_heads: int) -> Tensor:
    """Pre-norm residual block: attention then MLP, full bidirectional attention."""
    if h.ndim != 3 or h.shape[-1] != p.wq.shape[0]:
        raise ad.ShapeError(f"block input {h.shape} does not match d_model={p.wq.shape[0]}")
    h = h + attention(ad.rms_norm(h, p.g_attn), p, n_heads)
    return h + mlp(ad.rms_norm(h, p.g_mlp), p)


def embed_input(tokens, io: IOParams) -> Tensor:
    """Token embedding plus learned absolute position embedding."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    seq = tokens.shape[1]
    if seq > io.pos_emb.shape[0]:
        raise ad.ShapeError(f"sequence length {seq} exceeds seq_len={io.pos_emb.shape[0]}")
    pos = io.pos_emb if seq == io.pos_emb.shape[0] else io.pos_emb[:seq]
    return ad.embedding(io.tok_emb, tokens) + pos


def reflect_fuse(z: Tensor, x_emb: Tensor | None) -> Tensor:
    """Additive injection of the observation into the latent state.

    ``x_emb=None`` is the zero injection and returns ``z`` itself, so the same
    update rule covers both observed and input-free iterations.
    """
    if x_emb is None:
        return z
    if z.shape != x_emb.shape:
        raise ad.ShapeError(f"reflect_fuse shape mismatch: {z.shape} vs {x_emb.shape}")
    return z + x_emb


def head(z: Tensor, io: IOParams) -> Tensor:
    if z.shape[-1] != io.w_head.shape[0]:
        raise ad.ShapeError(f"head input {z.shape} does not match d_model={io.w_head.shape[0]}")
    return z @ io.w_head + io.b_head
