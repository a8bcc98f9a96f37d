"""Run configuration: flat ``section.key = value`` text files.

Lines starting with ``#`` are comments. Unknown keys are an error, and every
value round-trips through :func:`dumps`/:func:`loads` unchanged.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field

from .baselines import BaselineSpec, parse_kind
from .engine import SR2Config
from .tasks.dataset import TaskConfig
from .transformer import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    # empty paths: generate from the task section with this seed
    train: str = ""
    test: str = ""
    seed: int = 0


@dataclass
class ModelSection:
    kind: str = "sr2"
    d_model: int = 128
    n_heads: int = 4
    mlp_mult: int = 4
    init_scale: float = 1.0


@dataclass
class SR2Section:
    m: int = 4
    n: int = 4
    reflection_blocks: str = "1"
    alignment: str = "all"
    detach: bool = True
    test_time_blocks: int = 0
    loss_mode: str = "per_block"


@dataclass
class OptimSection:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95


@dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 64
    eval_batch_size: int = 256
    augment: bool = True
    blanks_only: bool = False
    checkpoint_every: int = 0


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    sr2: SR2Section = field(default_factory=SR2Section)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    run: RunSection = field(default_factory=RunSection)

    # ---- derived objects ------------------------------------------------------

    def model_config(self) -> ModelConfig:
        seq, vin, vout = self.task.dims()
        m = self.model
        return ModelConfig(m.d_model, m.n_heads, seq, vin, vout, m.mlp_mult, m.init_scale)

    def sr2_config(self) -> SR2Config:
        s = self.sr2
        return SR2Config(
            m=s.m, n=s.n,
            reflection_blocks=_parse_blocks(s.reflection_blocks),
            alignment=_parse_blocks(s.alignment),
            detach_between_blocks=s.detach,
            test_time_blocks=s.test_time_blocks or None,
            loss_mode=s.loss_mode,
        )

    def baseline_spec(self) -> BaselineSpec:
        return parse_kind(self.model.kind)

    def validate(self) -> RunConfig:
        try:
            self.model_config()
            self.sr2_config()
            self.baseline_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.task.name == "maze" and self.train.blanks_only:
            raise ConfigError("train.blanks_only applies to sudoku only")
        return self

    # ---- flat text form -------------------------------------------------------

    def to_flat(self) -> dict[str, str]:
        out = {}
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                out[f"{sec.name}.{f.name}"] = _fmt(getattr(obj, f.name))
        return out

    def hash(self) -> str:
        return hashlib.sha256(dumps(self).encode()).hexdigest()

    def set(self, key: str, value: str) -> None:
        if "." not in key:
            raise ConfigError(f"config key {key!r} must be section.name")
        sec_name, name = key.split(".", 1)
        sec = getattr(self, sec_name, None)
        if sec is None or not dataclasses.is_dataclass(sec):
            raise ConfigError(f"unknown config section {sec_name!r}")
        hints = typing.get_type_hints(type(sec))
        if name not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(sec, name, _coerce(hints[name], value, key))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(tp, text: str, key: str):
    text = text.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value {text!r} for {key}") from exc


def _parse_blocks(text: str) -> tuple[int, ...] | None:
    text = text.strip().lower()
    if text in ("all", "*", ""):
        return None
    try:
        return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
    except ValueError as exc:
        raise ConfigError(f"bad block list {text!r}") from exc


def dumps(cfg: RunConfig) -> str:
    lines = []
    current = None
    for key, value in cfg.to_flat().items():
        sec = key.split(".", 1)[0]
        if sec != current:
            if current is not None:
                lines.append("")
            lines.append(f"# {sec}")
            current = sec
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key = value")
        key, value = line.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg


def load(path) -> RunConfig:
    with open(path) as fh:
        return loads(fh.read())


def from_flat(flat: dict[str, str]) -> RunConfig:
    cfg = RunConfig()
    for k, v in flat.items():
        cfg.set(k, v)
    return cfg


PAPER_PRESET = {
    # training protocol of the full-scale runs
    "optim.lr": "0.0001",
    "train.batch_size": "768",
    "sr2.m": "16",
    "sr2.n": "16",
}
