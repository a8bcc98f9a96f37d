"""Unrolled schedule, periodic-alignment training and evaluation.

Every model in the package is one shared (or stacked) transformer block driven
by a :class:`Schedule`. Training follows the block loop: inside block ``b`` the
latent state is updated ``m`` times, optionally with the observation injected;
after every aligned block the head is read out, the loss is back-propagated, the
optimizer steps, and the latent state is detached before the next block.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .transformer import BlockParams, IOParams, ModelConfig, block_forward, embed_input, head, reflect_fuse


class ScheduleError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    """Raised when a loss becomes NaN/Inf; carries the step, block and value."""

    def __init__(self, step: int, block: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at optimizer step {step}, block {block}")
        self.step, self.block, self.loss = step, block, loss


@dataclass(frozen=True)
class SR2Config:
    """Unrolling schedule. Block indices are 1-based; ``None`` means every block."""

    m: int = 4
    n: int = 4
    reflection_blocks: tuple[int, ...] | None = (1,)
    alignment: tuple[int, ...] | None = None
    detach_between_blocks: bool = True
    test_time_blocks: int | None = None
    loss_mode: str = "per_block"

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ScheduleError("m and n must be >= 1")
        if self.reflection_blocks is not None:
            object.__setattr__(self, "reflection_blocks", tuple(sorted(set(self.reflection_blocks))))
            if not self.reflection_blocks:
                raise ScheduleError("at least one reflection block is required")
            if not all(1 <= b <= self.n for b in self.reflection_blocks):
                raise ScheduleError(f"reflection_blocks {self.reflection_blocks} outside 1..{self.n}")
        if self.alignment is not None:
            object.__setattr__(self, "alignment", tuple(sorted(set(self.alignment))))
            if not all(1 <= b <= self.n for b in self.alignment):
                raise ScheduleError(f"alignment {self.alignment} outside 1..{self.n}")
            if self.n not in self.alignment:
                raise ScheduleError("the final block must be aligned")
        if self.test_time_blocks is not None and self.test_time_blocks < 1:
            raise ScheduleError("test_time_blocks must be >= 1")
        if self.loss_mode not in ("per_block", "sum"):
            raise ScheduleError(f"unknown loss_mode {self.loss_mode!r}")

    @property
    def total_steps(self) -> int:
        return self.m * self.n


@dataclass(frozen=True)
class Schedule:
    """Fully determined forward schedule and parameter layout.

    ``inject_first_step_only`` injects the observation only at the first inner
    step of a reflection block. ``layer_per_step`` gives each inner step its own
    parameters (a stacked transformer). ``separate_refine`` uses a second
    parameter set for the input-free blocks.
    """

    sr2: SR2Config = field(default_factory=SR2Config)
    inject_first_step_only: bool = False
    layer_per_step: bool = False
    separate_refine: bool = False

    @property
    def m(self) -> int:
        return self.sr2.m

    @property
    def n(self) -> int:
        return self.sr2.n

    @property
    def n_param_sets(self) -> int:
        if self.layer_per_step:
            return self.m
        return 2 if self.separate_refine else 1

    def reflects(self, b: int) -> bool:
        rb = self.sr2.reflection_blocks
        return rb is None or b in rb

    def aligned(self, b: int, n_blocks: int | None = None) -> bool:
        n_blocks = self.n if n_blocks is None else n_blocks
        if b == n_blocks:
            return True
        a = self.sr2.alignment
        return a is None or b in a

    def step(self, b: int, t: int) -> tuple[int, bool]:
        """Parameter-set index and injection flag for inner step ``t`` of block ``b``."""
        inject = self.reflects(b) and (t == 1 or not self.inject_first_step_only)
        if self.layer_per_step:
            idx = t - 1
        elif self.separate_refine:
            idx = 0 if self.reflects(b) else 1
        else:
            idx = 0
        return idx, inject


class Model:
    """IO parameters, one or more block parameter sets and the schedule driving them."""

    def __init__(self, config: ModelConfig, schedule: Schedule, seed: int = 0, dtype=np.float32, kind: str = "sr2"):
        self.config = config
        self.schedule = schedule
        self.kind = kind
        rng = np.random.default_rng(seed)
        self.io = IOParams.init(config, rng, dtype)
        self.blocks = [BlockParams.init(config, rng, dtype) for _ in range(schedule.n_param_sets)]
        self.block_calls = 0

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"io.{n}", t) for n, t in self.io.items()]
        for i, bp in enumerate(self.blocks):
            out += [(f"block{i}.{n}", t) for n, t in bp.items()]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return self.io.count() + sum(b.count() for b in self.blocks)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def apply_block(self, z: Tensor, b: int, t: int, x_emb: Tensor | None) -> Tensor:
        idx, inject = self.schedule.step(b, t)
        self.block_calls += 1
        return block_forward(reflect_fuse(z, x_emb if inject else None), self.blocks[idx], self.config.n_heads)

    def init_state(self, batch: int) -> Tensor:
        return ad.zeros((batch, self.config.seq_len, self.config.d_model), dtype=self.io.tok_emb.dtype)


@dataclass
class AlignmentOutput:
    block: int
    z: Tensor
    logits: Tensor
    boundary: Tensor | None = None


def sr2_forward(tokens, model: Model, n_blocks: int | None = None, record_alignment_states: bool = True,
                probe_boundaries: bool = False) -> list[AlignmentOutput]:
    """Run the unrolled schedule and read out the head after aligned blocks.

    With ``probe_boundaries`` the detached state handed to each following block
    is made a gradient-tracking leaf, so its gradient can be inspected after
    backward. Only the final readout is returned unless
    ``record_alignment_states`` is set.
    """
    sched = model.schedule
    n_blocks = sched.n if n_blocks is None else n_blocks
    if n_blocks < 1:
        raise ScheduleError("need at least one block")
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    z = model.init_state(tokens.shape[0])
    outputs: list[AlignmentOutput] = []
    boundary = None
    for b in range(1, n_blocks + 1):
        x_emb = embed_input(tokens, model.io) if sched.reflects(b) else None
        for t in range(1, sched.m + 1):
            z = model.apply_block(z, b, t, x_emb)
        if sched.aligned(b, n_blocks):
            if record_alignment_states or b == n_blocks:
                outputs.append(AlignmentOutput(b, z, head(z, model.io), boundary))
            if sched.sr2.detach_between_blocks:
                z = z.detach()
                if probe_boundaries:
                    z.requires_grad_(True)
                boundary = z
    return outputs


# ---- optimizer ----------------------------------------------------------------


def adam_atan2_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                    lr: float, beta1: float = 0.9, beta2: float = 0.95) -> None:
    """In-place AdamAtan2 update; ``step`` is the 1-based count including this update.

    The step direction is ``atan2(m_hat, sqrt(v_hat))``, which needs no epsilon
    and is bounded by pi/2 in magnitude.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    if lr == 0.0:
        return
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    param -= (lr * np.arctan2(m_hat, np.sqrt(v_hat))).astype(param.dtype, copy=False)


class AdamAtan2:
    """Per-parameter state; parameters whose grad is None are skipped."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.95):
        self.params = list(named_params)
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.m = {n: np.zeros_like(t.data) for n, t in self.params}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params}
        self.steps = {n: 0 for n, _ in self.params}
        self.step_count = 0

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None

    def step(self) -> None:
        self.step_count += 1
        for n, t in self.params:
            if t.grad is None:
                continue
            self.steps[n] += 1
            adam_atan2_step(t.data, t.grad, self.m[n], self.v[n], self.steps[n], self.lr, self.beta1, self.beta2)


# ---- data and metrics ---------------------------------------------------------


@dataclass
class TaskData:
    """Token arrays for one split; ``blank_token`` defines the blanks-only loss mask."""

    inputs: np.ndarray
    targets: np.ndarray
    ids: np.ndarray
    blank_token: int | None = 0

    def __len__(self) -> int:
        return len(self.inputs)

    def loss_mask(self, inputs: np.ndarray, blanks_only: bool) -> np.ndarray | None:
        if not blanks_only:
            return None
        if self.blank_token is None:
            raise ValueError("blanks-only loss needs a task with a blank token")
        return inputs == self.blank_token


@dataclass
class BlockMetrics:
    block: int
    loss: float
    cell_acc: float
    pass1: float


@dataclass
class Metrics:
    blocks: list[BlockMetrics]
    wall_s: float
    samples_per_s: float
    n_samples: int

    @property
    def final(self) -> BlockMetrics:
        return self.blocks[-1]

    @property
    def pass1(self) -> float:
        return self.final.pass1

    @property
    def cell_acc(self) -> float:
        return self.final.cell_acc

    def to_dict(self) -> dict:
        return asdict(self)


class _Tally:
    def __init__(self):
        self.loss = 0.0
        self.cells = 0
        self.cells_ok = 0
        self.rows = 0
        self.rows_ok = 0

    def add(self, logits: np.ndarray, targets: np.ndarray, mask: np.ndarray | None, loss: float | None = None):
        pred = logits.argmax(axis=-1)
        ok = pred == targets
        if mask is not None:
            ok = ok | ~mask
            self.cells += int(mask.sum())
            self.cells_ok += int((ok & mask).sum())
        else:
            self.cells += ok.size
            self.cells_ok += int(ok.sum())
        self.rows += ok.shape[0]
        self.rows_ok += int(ok.all(axis=1).sum())
        if loss is not None:
            self.loss += loss * ok.shape[0]

    def result(self, block: int) -> BlockMetrics:
        return BlockMetrics(block, self.loss / max(self.rows, 1), self.cells_ok / max(self.cells, 1),
                            self.rows_ok / max(self.rows, 1))


@dataclass
class TrainState:
    """Optimizer moments, data RNG and counters; everything needed to resume bit-exactly."""

    optimizer: AdamAtan2
    rng: np.random.Generator
    epoch: int = 0

    @property
    def step(self) -> int:
        return self.optimizer.step_count


def new_train_state(model: Model, lr: float, seed: int, beta1: float = 0.9, beta2: float = 0.95) -> TrainState:
    data_seed = np.random.SeedSequence([seed, 1])
    return TrainState(AdamAtan2(model.named_parameters(), lr, beta1, beta2), np.random.default_rng(data_seed))


def train_epoch(data: TaskData, model: Model, state: TrainState, batch_size: int = 64, augment=None,
                blanks_only: bool = False) -> Metrics:
    """One pass over ``data`` in a shuffled order drawn from ``state.rng``.

    ``augment(inputs, targets, rng)`` may transform each batch (training data only).
    """
    sched = model.schedule
    cfg = sched.sr2
    opt = state.optimizer
    order = state.rng.permutation(len(data))
    aligned = [b for b in range(1, sched.n + 1) if sched.aligned(b)]
    tallies = {b: _Tally() for b in aligned}
    t0 = time.perf_counter()
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        x, y = data.inputs[idx], data.targets[idx]
        if augment is not None:
            x, y = augment(x, y, state.rng)
        mask = data.loss_mask(x, blanks_only)
        z = model.init_state(len(idx))
        pending = []
        for b in range(1, sched.n + 1):
            x_emb = embed_input(x, model.io) if sched.reflects(b) else None
            for t in range(1, sched.m + 1):
                z = model.apply_block(z, b, t, x_emb)
            if not sched.aligned(b):
                continue
            logits = head(z, model.io)
            loss = ad.cross_entropy(logits, y, mask)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(opt.step_count, b, value)
            tallies[b].add(logits.data, y, mask, value)
            if cfg.loss_mode == "per_block":
                opt.zero_grad()
                loss.backward()
                opt.step()
            else:
                pending.append(loss)
            if cfg.detach_between_blocks:
                z = z.detach()
        if pending:
            total = pending[0]
            for extra in pending[1:]:
                total = total + extra
            opt.zero_grad()
            total.backward()
            opt.step()
    wall = time.perf_counter() - t0
    state.epoch += 1
    return Metrics([tallies[b].result(b) for b in aligned], wall, len(data) / wall if wall > 0 else float("inf"),
                   len(data))


def evaluate(data: TaskData, model: Model, test_time_blocks: int | None = None, batch_size: int = 256,
             blanks_only: bool = False) -> Metrics:
    """Forward-only evaluation with ``n`` replaced by ``test_time_blocks``.

    Prediction is the per-position argmax of the final logits; pass@1 counts
    instances whose every scored position is correct.
    """
    k = test_time_blocks or model.schedule.sr2.test_time_blocks or model.schedule.n
    if k < 1:
        raise ScheduleError("test_time_blocks must be >= 1")
    tally = _Tally()
    t0 = time.perf_counter()
    with ad.no_grad():
        for start in range(0, len(data), batch_size):
            x = data.inputs[start:start + batch_size]
            y = data.targets[start:start + batch_size]
            mask = data.loss_mask(x, blanks_only)
            out = sr2_forward(x, model, n_blocks=k, record_alignment_states=False)[-1]
            loss = ad.cross_entropy(out.logits, y, mask).item()
            tally.add(out.logits.data, y, mask, loss)
    wall = time.perf_counter() - t0
    return Metrics([tally.result(k)], wall, len(data) / wall if wall > 0 else float("inf"), len(data))


def with_blocks(cfg: SR2Config, n: int) -> SR2Config:
    """The same schedule with a different block count (reflection/alignment clipped)."""
    rb = cfg.reflection_blocks
    if rb is not None:
        rb = tuple(b for b in rb if b <= n) or (1,)
    al = cfg.alignment
    if al is not None:
        al = tuple(sorted({b for b in al if b <= n} | {n}))
    return replace(cfg, n=n, reflection_blocks=rb, alignment=al)
