"""``sr2`` command line.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections import Counter

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import checkpoint as ckpt
from . import config as config_mod
from . import runner
from .autodiff import NonFiniteError
from .config import ConfigError, RunConfig
from .engine import ScheduleError, TrainingDiverged
from .report import ReportError, plot_csv, write_csv
from .ssm import verify as ssm_verify
from .tasks import dataset as ds

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3

PAPER_COUNTS = {
    "sudoku": {"task.name": "sudoku", "task.box": "3", "task.n_train": "1000", "task.n_test": "1000"},
    "maze": {"task.name": "maze", "task.width": "30", "task.height": "30",
             "task.n_train": "1000", "task.n_test": "1000"},
}


class UsageError(Exception):
    pass


class VerificationFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _pairs(text: str) -> list[tuple[int, int]]:
    out = []
    for tok in text.replace(" ", "").split(","):
        if not tok:
            continue
        try:
            m, n = tok.lower().split("x")
            out.append((int(m), int(n)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected MxN pairs like 4x4,2x8, got {tok!r}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    sup = argparse.SUPPRESS
    g.add_argument("--config", metavar="PATH", default=sup, help="run config file (section.key = value lines)")
    g.add_argument("--seed", type=int, metavar="U64", default=sup, help="run seed (run.seed)")
    g.add_argument("--threads", type=int, metavar="N", default=sup, help="worker/BLAS threads (1 = bit-reproducible)")
    g.add_argument("--out", metavar="DIR", default=sup, help="output directory")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", default=sup, dest="overrides",
                   help="override a config key, e.g. --set optim.lr=1e-3 (repeatable)")

    p = _Parser(prog="sr2", description="Reflective self-refinement training and analysis tool.", parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("generate-data", parents=[common], help="write train/test dataset files")
    s.add_argument("--task", choices=["sudoku", "maze"])
    s.add_argument("--box", type=int, help="sudoku sub-grid size (grid is box^2 x box^2)")
    s.add_argument("--clues", type=int, help="sudoku clue count")
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--keep-fraction", type=float, help="maze: keep this hardest fraction of a larger pool")
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--paper-counts", choices=sorted(PAPER_COUNTS), help="benchmark-sized preset (1,000 instances)")
    s.add_argument("--import-test", metavar="PATH", help="use an external sudoku file as the test split")
    s.add_argument("--no-validate", action="store_true", help="skip re-reading and validating the written files")

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--kind", help="model kind, e.g. sr2, block_universal, sr2_mixture(2), standard_transformer:8")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--train-data", metavar="PATH")
    s.add_argument("--test-data", metavar="PATH")
    s.add_argument("--paper-preset", action="store_true", help="full-scale optimizer/batch/schedule settings")
    s.add_argument("--resume", metavar="CHECKPOINT", help="continue training from a checkpoint")
    s.add_argument("--quiet", action="store_true")

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--data", metavar="PATH", help="dataset file (default: the checkpoint's test split)")
    s.add_argument("--test-steps", type=_int_list, metavar="K[,K...]",
                   help="test-time block counts; more than one writes a sweep CSV")
    s.add_argument("--repeats", type=int, default=1, help="timing repeats per k (best throughput kept)")

    s = sub.add_parser("ablate", parents=[common], help="train every variant of an ablation suite")
    s.add_argument("--suite", choices=["table2"], default="table2")

    s = sub.add_parser("sweep", parents=[common], help="train over a grid of (m, n) schedules")
    s.add_argument("--budget", type=int, help="all (m, n) with m*n = BUDGET")
    s.add_argument("--grid", type=_pairs, metavar="MxN[,MxN...]")
    s.add_argument("--ms", type=_int_list, metavar="M[,M...]")
    s.add_argument("--ns", type=_int_list, metavar="N[,N...]")

    s = sub.add_parser("plot", parents=[common], help="SVG line chart from a metrics CSV")
    s.add_argument("csv")
    s.add_argument("-o", "--output", metavar="SVG")
    s.add_argument("--x")
    s.add_argument("--y", default="pass1")
    s.add_argument("--series")
    s.add_argument("--title")

    s = sub.add_parser("ssm-verify", parents=[common], help="check the MAP solver against the RTS smoother")
    s.add_argument("--instances", type=int, default=100)
    s.add_argument("--max-d", type=int, default=6)
    s.add_argument("--max-T", type=int, default=50)
    return p


# ---- config resolution ------------------------------------------------------------


def _opt(args, name, default=None):
    return getattr(args, name, default)


def resolve_config(args, base: RunConfig | None = None, extra: dict[str, str] | None = None) -> RunConfig:
    """Defaults <- base/config file <- presets <- flags <- --set overrides."""
    cfg = base if base is not None else RunConfig()
    path = _opt(args, "config")
    if path:
        with open(path) as fh:
            config_mod.loads(fh.read(), cfg)
    for key, value in (extra or {}).items():
        cfg.set(key, value)
    if _opt(args, "seed") is not None:
        cfg.run.seed = args.seed
    for item in _opt(args, "overrides") or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg.validate()


def _flag_overrides(args, mapping: dict[str, str]) -> dict[str, str]:
    out = {}
    for attr, key in mapping.items():
        v = _opt(args, attr)
        if v is not None:
            out[key] = str(v)
    return out


def _out_dir(args, default: str) -> str:
    out = _opt(args, "out") or default
    os.makedirs(out, exist_ok=True)
    return out


# ---- commands -----------------------------------------------------------------


def _difficulty_summary(records: list[ds.PuzzleRecord]) -> str:
    if not records:
        return "empty"
    d = np.array([r.difficulty for r in records])
    hist = Counter(int(v) for v in d)
    top = ", ".join(f"{k}:{hist[k]}" for k in sorted(hist)[:12])
    more = " ..." if len(hist) > 12 else ""
    return (f"difficulty min {d.min():g} mean {d.mean():.2f} median {np.median(d):g} max {d.max():g}; "
            f"histogram {{{top}{more}}}")


def cmd_generate_data(args) -> int:
    extra = dict(PAPER_COUNTS[args.paper_counts]) if args.paper_counts else {}
    extra.update(_flag_overrides(args, {
        "task": "task.name", "box": "task.box", "clues": "task.clues", "width": "task.width",
        "height": "task.height", "keep_fraction": "task.keep_fraction", "n_train": "task.n_train",
        "n_test": "task.n_test"}))
    cfg = resolve_config(args, extra=extra)
    seed = _opt(args, "seed", cfg.data.seed)
    cfg.data.seed = seed
    out = _out_dir(args, "data")
    task = cfg.task
    if args.import_test:
        if task.name != "sudoku":
            raise UsageError("--import-test is for sudoku files")
        test = ds.import_sudoku(args.import_test, box=task.box, first_id=10 ** 9)
        task_nt = ds.TaskConfig(**{**task.__dict__, "n_test": 0})
        train, _ = ds.generate_splits(task_nt, seed, _opt(args, "threads", 1) or 1)
        clash = {r.key() for r in train} & {r.key() for r in test}
        if clash:
            raise VerificationFailure(f"{len(clash)} imported test puzzles also occur in the generated train split")
    else:
        train, test = ds.generate_splits(task, seed, _opt(args, "threads", 1) or 1)
    paths = {}
    for split, recs in (("train", train), ("test", test)):
        path = os.path.join(out, f"{split}.tsv")
        ds.write_dataset(path, task, recs, seed, split)
        paths[split] = path
        print(f"{split}: {len(recs)} {task.name} instances -> {path}")
        print(f"  {_difficulty_summary(recs)}")
    if not args.no_validate:
        for split, path in paths.items():
            rcfg, _, recs = ds.read_dataset(path)
            bad = [r.instance_id for r in recs if not ds.validate_record(rcfg, r)]
            if bad:
                raise VerificationFailure(f"{path}: {len(bad)} records fail validation (first id {bad[0]})")
        print("validation: every record re-imported and passed its checker")
    return EXIT_OK


def cmd_train(args) -> int:
    extra = dict(config_mod.PAPER_PRESET) if args.paper_preset else {}
    extra.update(_flag_overrides(args, {
        "kind": "model.kind", "epochs": "train.epochs", "lr": "optim.lr", "batch_size": "train.batch_size",
        "train_data": "data.train", "test_data": "data.test"}))
    base = runner.config_from_checkpoint(args.resume) if args.resume else None
    cfg = resolve_config(args, base=base, extra=extra)
    out = _out_dir(args, "run")
    log = None if args.quiet else (lambda s: print(s, flush=True))
    res = runner.run_training(cfg, out, resume=args.resume, threads=_opt(args, "threads", 1) or 1, log=log)
    print(json.dumps({"pass1": res.eval.pass1, "cell_acc": res.eval.cell_acc,
                      "samples_per_s": round(res.eval.samples_per_s, 1), "checkpoint": os.path.join(out, "checkpoint.bin")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, model, _ = ckpt.load(args.checkpoint)
    if args.data:
        _, _, recs = ds.read_dataset(args.data)
        test = ds.to_task_data(cfg.task, recs)
        data_hash = ds.file_hash(args.data)
    else:
        data = runner.load_data(cfg, _opt(args, "threads", 1) or 1, need_train=False)
        test, data_hash = data.test, data.hash
    if test.inputs.shape[1] != model.config.seq_len:
        raise UsageError(f"dataset sequence length {test.inputs.shape[1]} does not match the model "
                         f"({model.config.seq_len})")
    ks = args.test_steps or [cfg.sr2.test_time_blocks or model.schedule.n]
    rows = runner.sweep_test_blocks(model, test, ks, cfg.train.eval_batch_size, args.repeats, cfg.train.blanks_only)
    print(f"{'k':>4} {'steps':>6} {'pass@1':>8} {'cell acc':>9} {'samples/s':>10}")
    for r in rows:
        print(f"{r['k']:>4} {r['steps']:>6} {r['pass1']:>8.4f} {r['cell_acc']:>9.4f} {r['samples_per_s']:>10.1f}")
    if len(rows) > 1 or _opt(args, "out"):
        out = _out_dir(args, os.path.dirname(args.checkpoint) or ".")
        for r in rows:
            r["dataset_hash"] = data_hash
        path = os.path.join(out, "eval_sweep.csv")
        write_csv(path, list(rows[0]), rows, cfg.hash())
        print(f"wrote {path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args, "ablation")
    rows = runner.run_ablation(cfg, out, _opt(args, "threads", 1) or 1, log=lambda s: print(s, flush=True))
    for r in rows:
        print(f"{r['label']:<28} pass@1 {r['pass1']:.4f}  cell {r['cell_acc']:.4f}")
    print(f"wrote {os.path.join(out, 'ablation.csv')}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    pairs = []
    if args.budget:
        pairs += runner.budget_grid(args.budget)
    if args.grid:
        pairs += args.grid
    if args.ms or args.ns:
        pairs += [(m, n) for m in (args.ms or [cfg.sr2.m]) for n in (args.ns or [cfg.sr2.n])]
    if not pairs:
        raise UsageError("sweep needs --budget, --grid or --ms/--ns")
    if any(m < 1 or n < 1 for m, n in pairs):
        raise UsageError("m and n must be >= 1")
    out = _out_dir(args, "sweep")
    rows = runner.run_sweep(cfg, pairs, out, _opt(args, "threads", 1) or 1, log=lambda s: print(s, flush=True))
    for r in rows:
        print(f"m={r['m']:<3} n={r['n']:<3} pass@1 {r['pass1']:.4f}")
    print(f"wrote {os.path.join(out, 'sweep.csv')}")
    return EXIT_OK


def cmd_plot(args) -> int:
    if args.output:
        svg = args.output
    else:
        stem = os.path.splitext(os.path.basename(args.csv))[0] + ".svg"
        svg = os.path.join(_out_dir(args, os.path.dirname(args.csv) or "."), stem)
    n = plot_csv(args.csv, svg, x=args.x, y=args.y, series=args.series, title=args.title)
    print(f"wrote {svg} ({n} points)")
    return EXIT_OK


def cmd_ssm_verify(args) -> int:
    checks = ssm_verify(args.instances, _opt(args, "seed", 0) or 0, args.max_d, args.max_T)
    worst = max(c.map_vs_smoother for c in checks)
    failed = [c for c in checks if not c.ok]
    deficient = sum(c.rank < c.d * c.T for c in checks)
    print(f"instances: {len(checks)}  max |MAP - smoother|: {worst:.3e}  "
          f"positive definite: {sum(c.pd for c in checks)}/{len(checks)}  rank-deficient B: {deficient}/{len(checks)}")
    if failed:
        for c in failed[:5]:
            print(f"  FAIL d={c.d} m={c.m} T={c.T} diff={c.map_vs_smoother:.3e} rank={c.rank} pd={c.pd}")
        return EXIT_VERIFY
    print("all instances passed")
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
    "ssm-verify": cmd_ssm_verify,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    threads = _opt(args, "threads")
    if threads is not None and threads < 1:
        print("sr2: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=threads or 1):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ScheduleError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"sr2: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VerificationFailure, ds.DatasetError, ckpt.CheckpointError, ReportError) as exc:
        print(f"sr2: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (TrainingDiverged, NonFiniteError, FloatingPointError, np.linalg.LinAlgError,
            MemoryError, OSError) as exc:
        print(f"sr2: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
