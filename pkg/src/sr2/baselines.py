"""Reference architectures and SR² ablations as schedules over the same block.

Every kind here reuses the one block implementation, the loss, the optimizer
and the data pipeline; they differ only in the forward schedule and in how many
parameter sets exist.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .engine import Model, Schedule, ScheduleError, SR2Config
from .transformer import ModelConfig

KINDS = (
    "sr2",
    "standard_transformer",
    "block_universal",
    "recurrent_depth",
    "reflective_model",
    "flattened_reflective",
    "sr2_no_self_refinement",
    "sr2_no_reflection",
    "sr2_mixture",
    "sr2_separate_function",
)

# row label -> (kind, k)
TABLE2_SUITE = (
    ("No Self-Refinement", "sr2_no_self_refinement", None),
    ("No Reflection", "sr2_no_reflection", None),
    ("Mixture (2 Reflections)", "sr2_mixture", 2),
    ("Mixture (4 Reflections)", "sr2_mixture", 4),
    ("Separate Function", "sr2_separate_function", None),
    ("Reflective Model", "reflective_model", None),
    ("Flattened Reflective Model", "flattened_reflective", None),
    ("SR2", "sr2", None),
)

STANDARD_MAX_DEPTH = 8


@dataclass(frozen=True)
class BaselineSpec:
    kind: str = "sr2"
    depth: int | None = None
    k: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.kind == "sr2_mixture" and (self.k is None or self.k < 1):
            raise ValueError("sr2_mixture needs k >= 1")
        if self.depth is not None and self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def label(self) -> str:
        return f"sr2_mixture({self.k})" if self.kind == "sr2_mixture" else self.kind


def evenly_spaced_blocks(k: int, n: int) -> tuple[int, ...]:
    """k block indices in 1..n, starting at block 1 and spread evenly."""
    if k > n:
        raise ScheduleError(f"cannot place {k} reflection blocks in {n} blocks")
    return tuple(sorted({1 + (i * n) // k for i in range(k)}))


def build_schedule(spec: BaselineSpec, sr2: SR2Config) -> Schedule:
    m, n = sr2.m, sr2.n
    everything = replace(sr2, reflection_blocks=None)
    kind = spec.kind
    if kind == "sr2":
        return Schedule(sr2)
    if kind == "sr2_no_self_refinement":
        return Schedule(everything)
    if kind == "sr2_no_reflection":
        return Schedule(replace(sr2, reflection_blocks=(1,)), inject_first_step_only=True)
    if kind == "sr2_mixture":
        return Schedule(replace(sr2, reflection_blocks=evenly_spaced_blocks(spec.k, n)))
    if kind == "sr2_separate_function":
        return Schedule(sr2, separate_refine=True)
    if kind == "block_universal":
        cfg = replace(sr2, reflection_blocks=(1,), alignment=(n,), detach_between_blocks=False)
        return Schedule(cfg, inject_first_step_only=True)
    if kind == "recurrent_depth":
        cfg = replace(sr2, reflection_blocks=None, alignment=(n,), detach_between_blocks=False)
        return Schedule(cfg)
    if kind == "reflective_model":
        depth = spec.depth or m
        return Schedule(replace(everything, m=depth), inject_first_step_only=True, layer_per_step=True)
    if kind == "flattened_reflective":
        return Schedule(everything, inject_first_step_only=True)
    if kind == "standard_transformer":
        depth = spec.depth or min(m * n, STANDARD_MAX_DEPTH)
        cfg = SR2Config(m=depth, n=1, reflection_blocks=(1,), alignment=None,
                        detach_between_blocks=False, loss_mode=sr2.loss_mode)
        return Schedule(cfg, inject_first_step_only=True, layer_per_step=True)
    raise ValueError(f"unknown model kind {kind!r}")


def build_baseline(spec: BaselineSpec, model_config: ModelConfig, sr2: SR2Config | None = None, seed: int = 0,
                   dtype=np.float32) -> Model:
    """A runnable :class:`Model` with the schedule and parameter layout of ``spec``."""
    schedule = build_schedule(spec, sr2 or SR2Config())
    return Model(model_config, schedule, seed=seed, dtype=dtype, kind=spec.label)


def parse_kind(text: str) -> BaselineSpec:
    """Parse ``kind``, ``kind:depth`` or ``sr2_mixture(k)``."""
    text = text.strip()
    if text.startswith("sr2_mixture"):
        inner = text[len("sr2_mixture"):].strip("():")
        return BaselineSpec("sr2_mixture", k=int(inner) if inner else None)
    if ":" in text:
        kind, depth = text.split(":", 1)
        return BaselineSpec(kind, depth=int(depth))
    return BaselineSpec(text)
