"""Sudoku validity, solving, generation, augmentation and token encoding.

Grids are square numpy integer arrays of side ``N = box**2`` holding 0 for a
blank and 1..N for digits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GenerationError(RuntimeError):
    pass


def infer_box(grid: np.ndarray) -> int:
    n = grid.shape[0]
    b = int(round(np.sqrt(n)))
    if grid.ndim != 2 or grid.shape[1] != n or b * b != n:
        raise ValueError(f"not a square sudoku grid: shape {grid.shape}")
    return b


def validate_sudoku(grid, box: int | None = None) -> bool:
    """True iff no row, column or box repeats a non-zero digit."""
    grid = np.asarray(grid)
    b = box or infer_box(grid)
    n = b * b
    if grid.shape != (n, n):
        raise ValueError(f"grid shape {grid.shape} does not match box {b}")
    if grid.min() < 0 or grid.max() > n:
        raise ValueError(f"cell values must lie in 0..{n}")
    onehot = grid[:, :, None] == np.arange(1, n + 1)
    if (onehot.sum(axis=1) > 1).any() or (onehot.sum(axis=0) > 1).any():
        return False
    boxes = onehot.reshape(b, b, b, b, n).sum(axis=(1, 3))
    return not (boxes > 1).any()


def is_complete(grid, box: int | None = None) -> bool:
    grid = np.asarray(grid)
    return bool((grid != 0).all()) and validate_sudoku(grid, box)


# ---- solver -------------------------------------------------------------------


@dataclass
class SolveResult:
    count: int
    solution: np.ndarray | None
    guesses: int


def solve(grid, limit: int = 2, box: int | None = None, rng: np.random.Generator | None = None) -> SolveResult:
    """Count completions of ``grid`` up to ``limit`` by bitmask backtracking.

    Branches on the cell with fewest candidates. ``guesses`` counts branch
    points with more than one candidate, used as a difficulty score. With
    ``rng`` the candidate order is shuffled (used to draw random solutions).
    """
    grid = np.asarray(grid)
    b = box or infer_box(grid)
    n = b * b
    full = (1 << (n + 1)) - 2
    cells = [int(v) for v in grid.reshape(-1)]
    rows = [0] * n
    cols = [0] * n
    boxes = [0] * n
    box_of = [(i // n // b) * b + (i % n) // b for i in range(n * n)]
    for i, v in enumerate(cells):
        if v:
            bit = 1 << v
            r, c, bx = i // n, i % n, box_of[i]
            if (rows[r] | cols[c] | boxes[bx]) & bit:
                return SolveResult(0, None, 0)
            rows[r] |= bit
            cols[c] |= bit
            boxes[bx] |= bit
    empty = [i for i, v in enumerate(cells) if v == 0]
    found: list[list[int]] = []
    guesses = 0

    def recurse(remaining: list[int]) -> bool:
        nonlocal guesses
        if not remaining:
            found.append(cells.copy())
            return len(found) >= limit
        best, best_mask, best_count = -1, 0, n + 1
        for j, i in enumerate(remaining):
            mask = full & ~(rows[i // n] | cols[i % n] | boxes[box_of[i]])
            cnt = bin(mask).count("1")
            if cnt < best_count:
                best, best_mask, best_count = j, mask, cnt
                if cnt <= 1:
                    break
        if best_count == 0:
            return False
        i = remaining[best]
        rest = remaining[:best] + remaining[best + 1:]
        digits = [d for d in range(1, n + 1) if best_mask >> d & 1]
        if rng is not None:
            rng.shuffle(digits)
        if len(digits) > 1:
            guesses += 1
        r, c, bx = i // n, i % n, box_of[i]
        for d in digits:
            bit = 1 << d
            cells[i] = d
            rows[r] |= bit
            cols[c] |= bit
            boxes[bx] |= bit
            stop = recurse(rest)
            rows[r] ^= bit
            cols[c] ^= bit
            boxes[bx] ^= bit
            cells[i] = 0
            if stop:
                return True
        return False

    recurse(empty)
    sol = np.array(found[0], dtype=grid.dtype).reshape(n, n) if found else None
    return SolveResult(len(found), sol, guesses)


def count_solutions(grid, limit: int = 2) -> int:
    return solve(grid, limit).count


def random_solution(box: int, rng: np.random.Generator) -> np.ndarray:
    n = box * box
    res = solve(np.zeros((n, n), dtype=np.int64), limit=1, box=box, rng=rng)
    return res.solution


def generate_sudoku(box: int, n_clues: int, seed, max_retries: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """A puzzle with exactly ``n_clues`` givens and a unique completion.

    Cells of a random full grid are blanked in random order, keeping a removal
    only if the completion stays unique, until ``n_clues`` remain. The whole
    procedure is a function of ``seed``.
    """
    n = box * box
    if not 0 < n_clues <= n * n:
        raise ValueError(f"n_clues must be in 1..{n * n}")
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        solution = random_solution(box, rng)
        puzzle = solution.copy()
        flat = puzzle.reshape(-1)
        filled = n * n
        for c in rng.permutation(n * n):
            if filled == n_clues:
                break
            saved = flat[c]
            flat[c] = 0
            if solve(puzzle, limit=2, box=box).count == 1:
                filled -= 1
            else:
                flat[c] = saved
        if filled == n_clues:
            return puzzle, solution
    raise GenerationError(f"no unique {n}x{n} puzzle with {n_clues} clues after {max_retries} attempts")


def difficulty(puzzle) -> int:
    """Branching decisions the solver needs to prove the solution unique."""
    return solve(puzzle, limit=2).guesses


# ---- augmentation -------------------------------------------------------------


@dataclass(frozen=True)
class SudokuAugmentation:
    """Digit relabeling plus row-band and column-stack permutations.

    ``digits[d]`` is the new label of digit ``d`` (``digits[0] == 0``); band ``i``
    of the output is band ``bands[i]`` of the input, likewise for stacks.
    """

    digits: tuple[int, ...]
    bands: tuple[int, ...]
    stacks: tuple[int, ...]

    @classmethod
    def identity(cls, box: int) -> SudokuAugmentation:
        return cls(tuple(range(box * box + 1)), tuple(range(box)), tuple(range(box)))

    @classmethod
    def sample(cls, box: int, rng: np.random.Generator) -> SudokuAugmentation:
        n = box * box
        digits = (0, *(int(d) + 1 for d in rng.permutation(n)))
        return cls(digits, tuple(int(i) for i in rng.permutation(box)), tuple(int(i) for i in rng.permutation(box)))

    def apply(self, grid) -> np.ndarray:
        grid = np.asarray(grid)
        b = len(self.bands)
        n = b * b
        out = np.asarray(self.digits, dtype=grid.dtype)[grid]
        out = out.reshape(b, b, n)[list(self.bands)].reshape(n, n)
        out = out.reshape(n, b, b)[:, list(self.stacks)].reshape(n, n)
        return out

    def then(self, other: SudokuAugmentation) -> SudokuAugmentation:
        """The single augmentation equal to applying ``self`` and then ``other``."""
        digits = tuple(other.digits[d] for d in self.digits)
        bands = tuple(self.bands[i] for i in other.bands)
        stacks = tuple(self.stacks[i] for i in other.stacks)
        return SudokuAugmentation(digits, bands, stacks)


def augment_sudoku(puzzle, solution, seed) -> tuple[np.ndarray, np.ndarray]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    aug = SudokuAugmentation.sample(infer_box(np.asarray(puzzle)), rng)
    return aug.apply(puzzle), aug.apply(solution)


def augment_batch(inputs: np.ndarray, targets: np.ndarray, rng: np.random.Generator):
    """Independent random augmentation of each row of flattened token batches."""
    n = int(round(np.sqrt(inputs.shape[1])))
    box = int(round(np.sqrt(n)))
    xs, ys = np.empty_like(inputs), np.empty_like(targets)
    for i in range(len(inputs)):
        aug = SudokuAugmentation.sample(box, rng)
        xs[i] = aug.apply(inputs[i].reshape(n, n)).reshape(-1)
        ys[i] = aug.apply(targets[i].reshape(n, n)).reshape(-1)
    return xs, ys


# ---- encoding -----------------------------------------------------------------


def encode_sudoku(grid) -> np.ndarray:
    """Row-major tokens; 0 is blank, 1..N are digits."""
    grid = np.asarray(grid)
    infer_box(grid)
    return grid.reshape(-1).astype(np.int64)


def decode_sudoku(scores) -> np.ndarray:
    """Grid from per-cell scores of shape (N*N, vocab), by argmax."""
    scores = np.asarray(scores)
    n = int(round(np.sqrt(scores.shape[0])))
    return scores.argmax(axis=-1).reshape(n, n)


def read_external(path) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Read one puzzle per line: N*N characters, ``0`` or ``.`` for blanks.

    A second field (after a comma, tab or space) is read as the solution.
    Blank lines and ``#`` comments are skipped.
    """
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.replace(",", " ").replace("\t", " ").split()
            grids = [_parse_grid(f) for f in fields[:2]]
            out.append((grids[0], grids[1] if len(grids) > 1 else None))
    return out


def _parse_grid(text: str) -> np.ndarray:
    vals = [0 if ch == "." else int(ch, 36) for ch in text]
    n = int(round(np.sqrt(len(vals))))
    if n * n != len(vals):
        raise ValueError(f"puzzle string of length {len(vals)} is not square")
    grid = np.array(vals, dtype=np.int64).reshape(n, n)
    infer_box(grid)
    return grid
