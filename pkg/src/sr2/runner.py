"""Training, evaluation and experiment orchestration behind the CLI."""

from __future__ import annotations

import copy
import hashlib
import json
import os
import time
from dataclasses import dataclass
from typing import Callable

from . import __version__
from . import checkpoint as ckpt
from .baselines import TABLE2_SUITE, BaselineSpec, build_baseline
from .config import ConfigError, RunConfig, dumps
from .engine import Metrics, Model, TaskData, TrainState, evaluate, new_train_state, train_epoch
from .report import MetricsLog, write_csv
from .tasks import dataset as ds
from .tasks.sudoku import augment_batch


@dataclass
class Data:
    task: ds.TaskConfig
    train: TaskData
    test: TaskData
    hash: str


def _records_hash(train: list[ds.PuzzleRecord], test: list[ds.PuzzleRecord]) -> str:
    h = hashlib.sha256()
    for split, recs in (("train", train), ("test", test)):
        h.update(split.encode())
        for r in recs:
            h.update(f"{ds.tokens_to_str(r.inputs)}\t{ds.tokens_to_str(r.targets)}\t{r.instance_id}\n".encode())
    return h.hexdigest()


def load_data(cfg: RunConfig, threads: int = 1, need_train: bool = True) -> Data:
    """Read the configured dataset files, or regenerate the splits from ``data.seed``.

    When files are given, the task section is synchronised with their headers
    so the model dimensions always match the data.
    """
    if bool(cfg.data.train) != bool(cfg.data.test) and need_train:
        raise ConfigError("set both data.train and data.test, or neither")
    if cfg.data.test:
        test_cfg, _, test = ds.read_dataset(cfg.data.test)
        train = []
        if need_train and cfg.data.train:
            train_cfg, _, train = ds.read_dataset(cfg.data.train)
            if train_cfg.dims() != test_cfg.dims() or train_cfg.name != test_cfg.name:
                raise ConfigError("train and test files describe different tasks")
            overlap = {r.instance_id for r in train} & {r.instance_id for r in test}
            if overlap:
                raise ConfigError(f"train and test share {len(overlap)} instance ids")
        for f in ("name", "box", "width", "height"):
            setattr(cfg.task, f, getattr(test_cfg, f))
        task = cfg.task
    else:
        task = cfg.task
        train, test = ds.generate_splits(task, cfg.data.seed, threads)
    return Data(task, ds.to_task_data(task, train), ds.to_task_data(task, test), _records_hash(train, test))


def build_model(cfg: RunConfig) -> Model:
    return build_baseline(cfg.baseline_spec(), cfg.model_config(), cfg.sr2_config(), seed=cfg.run.seed)


def _structure(cfg: RunConfig) -> tuple:
    return cfg.model_config(), cfg.sr2_config(), cfg.baseline_spec()


@dataclass
class RunResult:
    model: Model
    state: TrainState
    eval: Metrics
    dataset_hash: str
    out_dir: str | None


def eval_record(metrics: Metrics, k: int, cfg: RunConfig, dataset_hash: str) -> dict:
    return {
        "pass1": metrics.pass1,
        "cell_acc": metrics.cell_acc,
        "loss": metrics.final.loss,
        "samples_per_s": metrics.samples_per_s,
        "test_blocks": k,
        "n_samples": metrics.n_samples,
        "config_hash": cfg.hash(),
        "dataset_hash": dataset_hash,
        "tool_version": __version__,
    }


def run_training(cfg: RunConfig, out_dir: str | None, resume: str | None = None, threads: int = 1,
                 log: Callable[[str], None] | None = None, data: Data | None = None) -> RunResult:
    """Train for ``cfg.train.epochs`` total epochs, checkpointing into ``out_dir``.

    With ``resume`` the model, optimizer moments and data RNG are restored and
    training continues from the stored epoch; the result is bit-identical to an
    uninterrupted run with the same config and thread count.
    """
    log = log or (lambda s: None)
    cfg.validate()
    data = data or load_data(cfg, threads)
    if resume:
        saved_cfg, model, state = ckpt.load(resume)
        if _structure(saved_cfg) != _structure(cfg) or saved_cfg.run.seed != cfg.run.seed:
            raise ConfigError(f"{resume}: checkpoint model/schedule/seed differ from the run config")
        if state is None:
            raise ConfigError(f"{resume}: checkpoint has no training state to resume from")
        state.optimizer.lr = cfg.optim.lr
    else:
        model = build_model(cfg)
        state = new_train_state(model, cfg.optim.lr, cfg.run.seed, cfg.optim.beta1, cfg.optim.beta2)
    if state.epoch > cfg.train.epochs:
        raise ConfigError(f"checkpoint is at epoch {state.epoch}, beyond train.epochs={cfg.train.epochs}")

    metrics_log = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w") as fh:
            fh.write(dumps(cfg))
        metrics_log = MetricsLog(os.path.join(out_dir, "metrics.csv"), model.kind, cfg.hash())
        metrics_log.truncate_after(state.epoch)

    augment = augment_batch if (cfg.train.augment and data.task.name == "sudoku") else None
    every = cfg.train.checkpoint_every
    log(f"training {model.kind}: {model.param_count()} parameters, {len(data.train)} train / "
        f"{len(data.test)} test, epochs {state.epoch + 1}..{cfg.train.epochs}")
    t0 = time.perf_counter()
    while state.epoch < cfg.train.epochs:
        m = train_epoch(data.train, model, state, cfg.train.batch_size, augment=augment,
                        blanks_only=cfg.train.blanks_only)
        if metrics_log:
            metrics_log.append(state.epoch, m)
        if out_dir and every and state.epoch % every == 0:
            ckpt.save(os.path.join(out_dir, f"checkpoint_epoch{state.epoch}.bin"), model, state, cfg)
        log(f"epoch {state.epoch}: loss {m.final.loss:.4f} cell {m.cell_acc:.3f} pass@1 {m.pass1:.3f} "
            f"({time.perf_counter() - t0:.0f}s)")

    final = evaluate(data.test, model, cfg.sr2.test_time_blocks or None, cfg.train.eval_batch_size,
                     blanks_only=cfg.train.blanks_only)
    k = cfg.sr2.test_time_blocks or model.schedule.n
    if out_dir:
        ckpt.save(os.path.join(out_dir, "checkpoint.bin"), model, state, cfg)
        with open(os.path.join(out_dir, "eval.json"), "w") as fh:
            json.dump(eval_record(final, k, cfg, data.hash), fh, indent=2, sort_keys=True)
            fh.write("\n")
    log(f"test: pass@1 {final.pass1:.4f} cell acc {final.cell_acc:.4f}")
    return RunResult(model, state, final, data.hash, out_dir)


def sweep_test_blocks(model: Model, data: TaskData, ks: list[int], batch_size: int = 256, repeats: int = 1,
                    blanks_only: bool = False) -> list[dict]:
    """Evaluate at each test-time block count; throughput is the best of ``repeats``."""
    rows = []
    for k in ks:
        best = None
        for _ in range(max(1, repeats)):
            m = evaluate(data, model, k, batch_size, blanks_only)
            if best is None or m.samples_per_s > best.samples_per_s:
                best = m
        rows.append({"k": k, "pass1": best.pass1, "cell_acc": best.cell_acc, "loss": best.final.loss,
                     "samples_per_s": best.samples_per_s, "steps": k * model.schedule.m})
    return rows


def _variant(cfg: RunConfig, **updates) -> RunConfig:
    out = copy.deepcopy(cfg)
    for key, value in updates.items():
        sec, name = key.split("__")
        setattr(getattr(out, sec), name, value)
    return out


def run_ablation(cfg: RunConfig, out_dir: str | None, threads: int = 1,
                 log: Callable[[str], None] | None = None) -> list[dict]:
    """Every ablation-suite variant trained on the same data with the same seed and budget."""
    log = log or (lambda s: None)
    data = load_data(cfg, threads)
    rows = []
    for label, kind, k in TABLE2_SUITE:
        spec = BaselineSpec(kind, k=k)
        vcfg = _variant(cfg, model__kind=spec.label)
        sub = os.path.join(out_dir, spec.label.replace("(", "_").replace(")", "")) if out_dir else None
        log(f"== {label}")
        res = run_training(vcfg, sub, threads=threads, log=log, data=data)
        rows.append({"label": label, "kind": spec.label, "pass1": res.eval.pass1, "cell_acc": res.eval.cell_acc,
                     "params": res.model.param_count(), "m": vcfg.sr2.m, "n": vcfg.sr2.n,
                     "seed": vcfg.run.seed, "dataset_hash": data.hash})
    if out_dir:
        write_csv(os.path.join(out_dir, "ablation.csv"), list(rows[0]), rows, cfg.hash())
    return rows


def budget_grid(budget: int) -> list[tuple[int, int]]:
    """All (m, n) with m * n == budget."""
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    return [(m, budget // m) for m in range(1, budget + 1) if budget % m == 0]


def run_sweep(cfg: RunConfig, pairs: list[tuple[int, int]], out_dir: str | None, threads: int = 1,
              log: Callable[[str], None] | None = None) -> list[dict]:
    log = log or (lambda s: None)
    data = load_data(cfg, threads)
    rows = []
    for m, n in sorted(set(pairs)):
        al = cfg.sr2.alignment
        if al not in ("all", "*", ""):
            al = "all"  # explicit alignment sets do not transfer across n
        vcfg = _variant(cfg, sr2__m=m, sr2__n=n, sr2__alignment=al)
        sub = os.path.join(out_dir, f"m{m}_n{n}") if out_dir else None
        log(f"== m={m} n={n}")
        res = run_training(vcfg, sub, threads=threads, log=log, data=data)
        rows.append({"m": m, "n": n, "budget": m * n, "kind": vcfg.model.kind, "pass1": res.eval.pass1,
                     "cell_acc": res.eval.cell_acc, "dataset_hash": data.hash})
    if out_dir:
        write_csv(os.path.join(out_dir, "sweep.csv"), list(rows[0]), rows, cfg.hash())
    return rows


def config_from_checkpoint(path: str) -> RunConfig:
    cfg, _, _ = ckpt.load(path)
    return cfg

