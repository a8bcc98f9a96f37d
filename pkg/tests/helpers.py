"""Independent oracles shared by the unit tests and the acceptance suite."""

from __future__ import annotations

import itertools

import networkx as nx
import numpy as np

from sr2 import autodiff as ad

# ---- autodiff gradient-check cases ------------------------------------------------
#
# Each case builds (fn, inputs) for one random shape. fn returns a scalar formed as
# a fixed random-weighted sum of the op's output, so no gradient is trivially zero.


def _shape(rng, lo=1, hi=3, max_dim=4):
    return tuple(int(v) for v in rng.integers(1, max_dim + 1, size=int(rng.integers(lo, hi + 1))))


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


def _case_add(rng):
    s = _shape(rng)
    t = s[int(rng.integers(len(s))):]  # broadcast a suffix
    a, b = rng.normal(size=s), rng.normal(size=t)
    ws = rng.normal(size=s)
    return (lambda x, y: ((x + y) * ad.tensor(ws)).sum()), [a, b]


def _case_mul(rng):
    s = _shape(rng)
    t = tuple(1 if rng.random() < 0.5 else d for d in s)
    ws = rng.normal(size=s)
    return (lambda x, y: ((x * y) * ad.tensor(ws)).sum()), [rng.normal(size=s), rng.normal(size=t)]


def _case_scale(rng):
    s = _shape(rng)
    c = float(rng.normal())
    ws = rng.normal(size=s)
    return (lambda x: (ad.scale(x, c) * ad.tensor(ws)).sum()), [rng.normal(size=s)]


def _case_sub_neg(rng):
    s = _shape(rng)
    ws = rng.normal(size=s)
    return (lambda x, y: ((-(x - y)) * ad.tensor(ws)).sum()), [rng.normal(size=s), rng.normal(size=s)]


def _case_gelu(rng):
    s = _shape(rng)
    ws = rng.normal(size=s)
    return (lambda x: (ad.gelu(x) * ad.tensor(ws)).sum()), [rng.normal(size=s) * 2]


def _case_relu(rng):
    s = _shape(rng)
    ws = rng.normal(size=s)
    return (lambda x: (ad.relu(x) * ad.tensor(ws)).sum()), [_away_from_zero(rng, s)]


def _case_sum(rng):
    s = _shape(rng, 2, 3)
    axis = int(rng.integers(len(s)))
    keep = bool(rng.random() < 0.5)
    out_shape = np.zeros(s).sum(axis=axis, keepdims=keep).shape
    ws = rng.normal(size=out_shape)
    return (lambda x: (ad.tsum(x, axis, keep) * ad.tensor(ws)).sum()), [rng.normal(size=s)]


def _case_mean(rng):
    s = _shape(rng, 2, 3)
    axis = int(rng.integers(len(s)))
    out_shape = np.zeros(s).mean(axis=axis).shape
    ws = rng.normal(size=out_shape)
    return (lambda x: (ad.mean(x, axis) * ad.tensor(ws)).sum()), [rng.normal(size=s)]


def _case_reshape(rng):
    s = _shape(rng, 2, 3)
    new = (int(np.prod(s)),) if rng.random() < 0.5 else (s[0], -1)
    out_shape = np.zeros(s).reshape(new).shape
    ws = rng.normal(size=out_shape)
    return (lambda x: (ad.reshape(x, new) * ad.tensor(ws)).sum()), [rng.normal(size=s)]


def _case_transpose(rng):
    s = _shape(rng, 2, 4)
    perm = tuple(int(v) for v in rng.permutation(len(s)))
    ws = rng.normal(size=tuple(s[p] for p in perm))
    return (lambda x: (ad.transpose(x, perm) * ad.tensor(ws)).sum()), [rng.normal(size=s)]


def _case_getitem(rng):
    s = _shape(rng, 2, 3, max_dim=5)
    idx = (slice(0, max(1, s[0] - 1)), ) + (slice(None, None, 2),)
    out_shape = np.zeros(s)[idx].shape
    ws = rng.normal(size=out_shape)
    return (lambda x: (x[idx] * ad.tensor(ws)).sum()), [rng.normal(size=s)]


def _case_matmul(rng):
    kind = int(rng.integers(3))
    i, k, j = (int(v) for v in rng.integers(1, 5, size=3))
    if kind == 0:
        sa, sb = (i, k), (k, j)
    elif kind == 1:  # batched @ 2-D (the folded path)
        sa, sb = (int(rng.integers(1, 4)), i, k), (k, j)
    else:  # batched @ batched
        b1, b2 = (int(v) for v in rng.integers(1, 3, size=2))
        sa, sb = (b1, b2, i, k), (b1, b2, k, j)
    out_shape = (np.zeros(sa) @ np.zeros(sb)).shape
    ws = rng.normal(size=out_shape)
    return (lambda x, y: ((x @ y) * ad.tensor(ws)).sum()), [rng.normal(size=sa), rng.normal(size=sb)]


def _case_softmax(rng):
    s = _shape(rng, 1, 3)
    axis = int(rng.integers(len(s)))
    ws = rng.normal(size=s)
    return (lambda x: (ad.softmax(x, axis) * ad.tensor(ws)).sum()), [rng.normal(size=s)]


def _case_rms_norm(rng):
    s = _shape(rng, 1, 3) + (int(rng.integers(2, 6)),)
    ws = rng.normal(size=s)
    return (lambda x, g: (ad.rms_norm(x, g) * ad.tensor(ws)).sum()), [rng.normal(size=s),
                                                                      rng.normal(size=s[-1:])]


def _case_cross_entropy(rng):
    lead = _shape(rng, 1, 2)
    vocab = int(rng.integers(2, 6))
    t = rng.integers(0, vocab, size=lead)
    mask = rng.random(lead) < 0.7
    mask.reshape(-1)[0] = True
    use_mask = bool(rng.random() < 0.5)
    return (lambda x: ad.cross_entropy(x, t, mask if use_mask else None)), [rng.normal(size=lead + (vocab,))]


def _case_embedding(rng):
    rows, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    idx = rng.integers(0, rows, size=_shape(rng, 1, 2))
    ws = rng.normal(size=idx.shape + (d,))
    return (lambda tbl: (ad.embedding(tbl, idx) * ad.tensor(ws)).sum()), [rng.normal(size=(rows, d))]


GRAD_CASES = {
    "add": _case_add,
    "mul": _case_mul,
    "scale": _case_scale,
    "sub_neg": _case_sub_neg,
    "gelu": _case_gelu,
    "relu": _case_relu,
    "sum": _case_sum,
    "mean": _case_mean,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "getitem": _case_getitem,
    "matmul": _case_matmul,
    "softmax": _case_softmax,
    "rms_norm": _case_rms_norm,
    "cross_entropy": _case_cross_entropy,
    "embedding": _case_embedding,
}


def op_gradcheck(op: str, n_shapes: int = 20, seed: int = 0) -> float:
    """Worst relative error of ``op`` over ``n_shapes`` random shapes."""
    rng = np.random.default_rng([seed, sorted(GRAD_CASES).index(op)])
    worst = 0.0
    for _ in range(n_shapes):
        fn, inputs = GRAD_CASES[op](rng)
        worst = max(worst, ad.gradcheck(fn, inputs, h=1e-5))
    return worst


# ---- sudoku oracles -----------------------------------------------------------------


def brute_force_valid(grid: np.ndarray) -> bool:
    """Triple-loop reference checker for non-zero duplicates."""
    n = grid.shape[0]
    b = int(round(n ** 0.5))
    for i in range(n):
        for j in range(n):
            v = grid[i, j]
            if v == 0:
                continue
            for k in range(n):
                if k != j and grid[i, k] == v:
                    return False
                if k != i and grid[k, j] == v:
                    return False
            bi, bj = (i // b) * b, (j // b) * b
            for r in range(bi, bi + b):
                for c in range(bj, bj + b):
                    if (r, c) != (i, j) and grid[r, c] == v:
                        return False
    return True


def brute_force_count(puzzle: np.ndarray, limit: int = 3) -> int:
    """Completions by plain cell-order enumeration (4x4 only)."""
    grid = puzzle.copy()
    n = grid.shape[0]
    blanks = [tuple(c) for c in np.argwhere(grid == 0)]
    count = 0

    def rec(k):
        nonlocal count
        if count >= limit:
            return
        if k == len(blanks):
            count += 1
            return
        r, c = blanks[k]
        for v in range(1, n + 1):
            grid[r, c] = v
            if brute_force_valid(grid):
                rec(k + 1)
        grid[r, c] = 0

    rec(0)
    return count


def all_4x4_solutions() -> list[np.ndarray]:
    """Every complete valid 4x4 grid (288 of them) by exhaustive row permutation."""
    rows = [np.array(p) for p in itertools.permutations(range(1, 5))]
    out = []
    for a in rows:
        for b in rows:
            g2 = np.stack([a, b])
            if not brute_force_valid(np.vstack([g2, np.zeros((2, 4), int)])):
                continue
            for c in rows:
                g3 = np.vstack([g2, c])
                if not brute_force_valid(np.vstack([g3, np.zeros((1, 4), int)])):
                    continue
                for d in rows:
                    g = np.vstack([g3, d])
                    if brute_force_valid(g):
                        out.append(g)
    return out


# ---- maze oracle --------------------------------------------------------------------


def dijkstra_length(walls: np.ndarray, start, goal) -> int | None:
    """Unit-weight shortest path length via networkx Dijkstra."""
    g = nx.grid_2d_graph(*walls.shape)
    g.remove_nodes_from([tuple(int(v) for v in c) for c in np.argwhere(walls)])
    try:
        return nx.dijkstra_path_length(g, tuple(start), tuple(goal))
    except nx.NetworkXNoPath:
        return None


def sudoku_corpus(n_random: int = 10_000, seed: int = 0):
    """Random grids (sparse and dense, 4x4 and 9x9) each followed by a one-cell mutant.

    Half of the random grids are blanked copies of complete solutions, so valid
    cases and near-misses are well represented.
    """
    from sr2.tasks.sudoku import random_solution

    rng = np.random.default_rng(seed)
    for i in range(n_random):
        box = 2 if i % 3 else 3
        n = box * box
        if i % 2:
            grid = random_solution(box, rng)
            grid[rng.random((n, n)) < rng.random()] = 0
        else:
            grid = rng.integers(0, n + 1, size=(n, n))
            grid[rng.random((n, n)) < rng.uniform(0.3, 1.0)] = 0
        yield grid
        mutant = grid.copy()
        r, c = rng.integers(n, size=2)
        mutant[r, c] = rng.integers(0, n + 1)
        yield mutant


def sudoku_disagreements(n_random: int = 10_000, seed: int = 0) -> tuple[int, int, int]:
    """(disagreements, grids checked, grids judged valid) against the brute-force checker."""
    from sr2.tasks.sudoku import validate_sudoku

    bad = total = valid = 0
    for grid in sudoku_corpus(n_random, seed):
        ref = brute_force_valid(grid)
        bad += validate_sudoku(grid) != ref
        total += 1
        valid += ref
    return bad, total, valid


def maze_disagreements(n_mazes: int = 1000, seed: int = 0) -> int:
    """Mazes whose BFS path, validator verdicts or lengths disagree with Dijkstra."""
    from sr2.tasks import maze as mz

    bad = 0
    for i in range(n_mazes):
        w, h = [(9, 9), (11, 7), (15, 15), (5, 13)][i % 4]
        inst = mz.generate_maze(w, h, np.random.SeedSequence([seed, i]))
        ref = dijkstra_length(inst.walls, inst.start, inst.goal)
        grid = np.zeros(inst.walls.shape, dtype=int)
        for c in inst.path:
            grid[c] = 1
        check = mz.validate_maze_path(inst, grid)
        ok = ref == mz.path_length(inst) and check.valid and check.optimal
        # a truncated path must be rejected
        if len(inst.path) > 2:
            cut = grid.copy()
            cut[inst.path[len(inst.path) // 2]] = 0
            ok &= not mz.validate_maze_path(inst, cut).valid
        bad += not ok
    return bad
