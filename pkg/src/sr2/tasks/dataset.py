"""Puzzle records, split generation and the tab-separated dataset file format.

File layout::

    #sr2-dataset task=sudoku size=2 count=500 generator=1 seed=0 split=train ... config_hash=<sha256>
    <input tokens>\t<target tokens>\t<instance id>\t<difficulty>

Tokens are written one base-36 character per position.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .. import __version__
from ..engine import TaskData
from . import maze as mz
from . import sudoku as sd

GENERATOR_VERSION = 1
MAGIC = "#sr2-dataset"
_ALPHABET = "0123456789abcdefghijklmnopqrstuvwxyz"


class DatasetError(ValueError):
    pass


@dataclass
class TaskConfig:
    name: str = "sudoku"
    box: int = 2
    clues: int = 0
    width: int = 9
    height: int = 9
    keep_fraction: float = 1.0
    n_train: int = 500
    n_test: int = 500

    def __post_init__(self):
        if self.name not in ("sudoku", "maze"):
            raise ValueError(f"unknown task {self.name!r}")

    @property
    def clue_count(self) -> int:
        if self.clues:
            return self.clues
        return {2: 6, 3: 30}.get(self.box, (self.box ** 4) // 2)

    @property
    def size(self) -> str:
        return str(self.box) if self.name == "sudoku" else f"{self.height}x{self.width}"

    def dims(self) -> tuple[int, int, int]:
        """(seq_len, vocab_in, vocab_out) of the token encoding."""
        if self.name == "sudoku":
            n = self.box * self.box
            return n * n, n + 1, n + 1
        return self.height * self.width, 4, 2


@dataclass
class PuzzleRecord:
    inputs: np.ndarray
    targets: np.ndarray
    instance_id: int
    difficulty: float = 0.0

    def key(self) -> str:
        return tokens_to_str(self.inputs)


def tokens_to_str(tokens) -> str:
    return "".join(_ALPHABET[int(t)] for t in np.asarray(tokens).reshape(-1))


def str_to_tokens(text: str) -> np.ndarray:
    return np.array([int(ch, 36) for ch in text], dtype=np.int64)


# ---- generation ---------------------------------------------------------------


def _candidate(args) -> PuzzleRecord:
    cfg, seed, index = args
    ss = np.random.SeedSequence([seed, index])
    if cfg.name == "sudoku":
        puzzle, solution = sd.generate_sudoku(cfg.box, cfg.clue_count, ss)
        return PuzzleRecord(sd.encode_sudoku(puzzle), sd.encode_sudoku(solution), -1, sd.difficulty(puzzle))
    inst = mz.generate_maze(cfg.width, cfg.height, ss)
    x, y = mz.encode_maze(inst)
    return PuzzleRecord(x, y, -1, mz.path_length(inst))


def _candidates(cfg: TaskConfig, seed: int, threads: int, chunk: int = 256):
    index = 0
    pool = ProcessPoolExecutor(threads) if threads > 1 else None
    try:
        while True:
            args = [(cfg, seed, i) for i in range(index, index + chunk)]
            yield from (pool.map(_candidate, args) if pool else map(_candidate, args))
            index += chunk
    finally:
        if pool:
            pool.shutdown(cancel_futures=True)


def generate_splits(cfg: TaskConfig, seed: int, threads: int = 1) -> tuple[list[PuzzleRecord], list[PuzzleRecord]]:
    """Train and test records with disjoint ids and disjoint puzzle inputs.

    Candidates are a pure function of ``(cfg, seed, index)`` and are consumed in
    index order, so the result does not depend on ``threads``. For mazes each
    split draws a pool of ``count / keep_fraction`` and keeps the hardest.
    """
    seen: set[str] = set()
    stream = _candidates(cfg, seed, threads)
    splits = []
    next_id = 0
    for count in (cfg.n_train, cfg.n_test):
        pool_size = count if cfg.name == "sudoku" else math.ceil(count / cfg.keep_fraction)
        pool: list[PuzzleRecord] = []
        attempts = 0
        while len(pool) < pool_size:
            rec = next(stream)
            attempts += 1
            if attempts > 50 * pool_size + 1000:
                raise DatasetError(f"could not find {pool_size} distinct instances; the task is too small")
            if rec.key() in seen:
                continue
            seen.add(rec.key())
            rec.instance_id = next_id
            next_id += 1
            pool.append(rec)
        if cfg.name == "maze" and cfg.keep_fraction < 1:
            insts = [decode_record(cfg, r) for r in pool]
            kept = {m.instance_id for m in mz.filter_hardest(insts, count / len(pool))}
            pool = [r for r in pool if r.instance_id in kept]
        splits.append(pool)
    stream.close()
    return splits[0], splits[1]


def decode_record(cfg: TaskConfig, rec: PuzzleRecord):
    if cfg.name == "sudoku":
        n = cfg.box * cfg.box
        return rec.inputs.reshape(n, n), rec.targets.reshape(n, n)
    return mz.decode_maze(rec.inputs, rec.targets, cfg.height, cfg.width, rec.instance_id)


def validate_record(cfg: TaskConfig, rec: PuzzleRecord) -> bool:
    """Run the task's validity predicate on a stored record."""
    if cfg.name == "sudoku":
        puzzle, solution = decode_record(cfg, rec)
        givens = puzzle != 0
        return (sd.is_complete(solution) and bool((puzzle[givens] == solution[givens]).all())
                and sd.count_solutions(puzzle) == 1)
    inst = decode_record(cfg, rec)
    return mz.validate_maze_path(inst, rec.targets.reshape(cfg.height, cfg.width)).optimal


def to_task_data(cfg: TaskConfig, records: list[PuzzleRecord]) -> TaskData:
    seq = cfg.dims()[0]
    if not records:
        empty = np.zeros((0, seq), dtype=np.int64)
        return TaskData(empty, empty.copy(), np.zeros(0, dtype=np.int64))
    return TaskData(
        np.stack([r.inputs for r in records]).astype(np.int64),
        np.stack([r.targets for r in records]).astype(np.int64),
        np.array([r.instance_id for r in records], dtype=np.int64),
        blank_token=0 if cfg.name == "sudoku" else None,
    )


def import_sudoku(path, box: int | None = None, first_id: int = 0) -> list[PuzzleRecord]:
    """Records from an external puzzle file; missing solutions are solved."""
    out = []
    for i, (puzzle, solution) in enumerate(sd.read_external(path)):
        if box is not None and puzzle.shape[0] != box * box:
            raise DatasetError(f"line {i + 1}: expected a {box * box}x{box * box} grid")
        res = sd.solve(puzzle, limit=2)
        if res.count != 1:
            raise DatasetError(f"line {i + 1}: puzzle has {res.count} completions (need exactly 1)")
        if solution is not None and not np.array_equal(solution, res.solution):
            raise DatasetError(f"line {i + 1}: supplied solution disagrees with the solver")
        out.append(PuzzleRecord(sd.encode_sudoku(puzzle), sd.encode_sudoku(res.solution), first_id + i, res.guesses))
    return out


# ---- file I/O -----------------------------------------------------------------


def header_fields(cfg: TaskConfig, seed: int, split: str, count: int) -> dict[str, str]:
    fields = {"task": cfg.name, "size": cfg.size, "count": str(count), "generator": str(GENERATOR_VERSION),
              "seed": str(seed), "split": split}
    if cfg.name == "sudoku":
        fields["clues"] = str(cfg.clue_count)
    else:
        fields["keep_fraction"] = repr(cfg.keep_fraction)
    return fields


def fields_hash(fields: dict[str, str]) -> str:
    canon = "\n".join(f"{k}={fields[k]}" for k in sorted(fields))
    return hashlib.sha256(canon.encode()).hexdigest()


def write_dataset(path, cfg: TaskConfig, records: list[PuzzleRecord], seed: int, split: str) -> None:
    fields = header_fields(cfg, seed, split, len(records))
    head = " ".join(f"{k}={v}" for k, v in fields.items())
    lines = [f"{MAGIC} {head} tool={__version__} config_hash={fields_hash(fields)}"]
    for r in records:
        lines.append(f"{tokens_to_str(r.inputs)}\t{tokens_to_str(r.targets)}\t{r.instance_id}\t{r.difficulty:g}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_dataset(path) -> tuple[TaskConfig, dict[str, str], list[PuzzleRecord]]:
    """Parse and check a dataset file; returns its task config, header and records."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(MAGIC + " "):
        raise DatasetError(f"{path}: missing {MAGIC} header")
    header = dict(tok.split("=", 1) for tok in lines[0][len(MAGIC) + 1:].split())
    stored_hash = header.pop("config_hash", None)
    tool = header.pop("tool", None)
    if stored_hash != fields_hash(header):
        raise DatasetError(f"{path}: header config hash does not match its fields")
    if tool is None or tool.split(".")[0] != __version__.split(".")[0]:
        raise DatasetError(f"{path}: written by incompatible tool version {tool}")
    if int(header["generator"]) > GENERATOR_VERSION:
        raise DatasetError(f"{path}: generator version {header['generator']} is newer than supported")
    if header["task"] == "sudoku":
        cfg = TaskConfig("sudoku", box=int(header["size"]), clues=int(header.get("clues", 0)))
    else:
        h, w = (int(v) for v in header["size"].split("x"))
        cfg = TaskConfig("maze", width=w, height=h, keep_fraction=float(header.get("keep_fraction", 1.0)))
    seq = cfg.dims()[0]
    records = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4):
            raise DatasetError(f"{path}:{ln}: expected 3 or 4 tab-separated fields")
        rec = PuzzleRecord(str_to_tokens(parts[0]), str_to_tokens(parts[1]), int(parts[2]),
                           float(parts[3]) if len(parts) == 4 else 0.0)
        if len(rec.inputs) != seq or len(rec.targets) != seq:
            raise DatasetError(f"{path}:{ln}: token length differs from {seq}")
        records.append(rec)
    if len(records) != int(header["count"]):
        raise DatasetError(f"{path}: header count {header['count']} but {len(records)} records")
    return cfg, header, records


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
