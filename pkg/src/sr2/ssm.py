"""Linear-Gaussian state-space model: ill-posed observation-only estimation
versus the MAP trajectory under a dynamic prior.

Model (1-based time)::

    z1 ~ N(mu0, P0),  z_t = A z_{t-1} + w_t,  w_t ~ N(0, Q)
    x_t = C z_t + v_t,  v_t ~ N(0, R)

The MAP trajectory minimises ``J(z) = 0.5 z'(B + D_dyn)z - (h_data + h_init)'z``
with ``B = Cb' Rb^-1 Cb`` and ``D_dyn`` block tridiagonal. It is solved by a
block Cholesky sweep and cross-checked against a Kalman filter followed by a
Rauch-Tung-Striebel backward pass, whose smoothed means are the same vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

RANK_RTOL = 1e-10


class ConditioningError(np.linalg.LinAlgError):
    """A matrix that must be positive definite failed its Cholesky factorization."""


@dataclass
class SSMParams:
    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P0: np.ndarray
    mu0: np.ndarray

    def __post_init__(self):
        for name in ("A", "C", "Q", "R", "P0", "mu0"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d, m = self.d, self.m
        shapes = {"A": (d, d), "C": (m, d), "Q": (d, d), "R": (m, m), "P0": (d, d), "mu0": (d,)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    def check(self, require_underdetermined: bool = True) -> None:
        """Raise unless Q, R, P0 are symmetric positive definite (and m < d)."""
        for name in ("Q", "R", "P0"):
            _chol(getattr(self, name), name)
        if require_underdetermined and not self.m < self.d:
            raise ValueError(f"observation is not under-determined: m={self.m}, d={self.d}")


def _chol(M: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.allclose(M, M.T, rtol=1e-12, atol=1e-12):
        raise ConditioningError(f"{name} is not symmetric")
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"{name} is not positive definite") from exc


def _noise_factor(S: np.ndarray, name: str) -> np.ndarray:
    """Square-root factor of a covariance; positive semi-definite (even zero) is allowed."""
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh((S + S.T) / 2)
        if w.min() < -1e-12 * max(1.0, abs(w).max()):
            raise ConditioningError(f"{name} is not positive semi-definite") from None
        return V * np.sqrt(np.clip(w, 0, None))


def random_spd(d: int, rng: np.random.Generator, scale: float = 1.0, floor: float = 0.1) -> np.ndarray:
    G = rng.standard_normal((d, d))
    return scale * (G @ G.T / d + floor * np.eye(d))


def random_params(d: int, m: int, rng: np.random.Generator) -> SSMParams:
    """A random stable instance with m observed combinations of d states."""
    A = rng.standard_normal((d, d))
    A *= rng.uniform(0.5, 0.99) / max(abs(np.linalg.eigvals(A)))
    return SSMParams(A=A, C=rng.standard_normal((m, d)), Q=random_spd(d, rng, 0.5), R=random_spd(m, rng, 0.5),
                     P0=random_spd(d, rng), mu0=rng.standard_normal(d))


def simulate(params: SSMParams, T: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Draw (z, x) trajectories of shape (T, d) and (T, m)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(seed)
    Lq = _noise_factor(params.Q, "Q")
    Lr = _noise_factor(params.R, "R")
    Lp = _noise_factor(params.P0, "P0")
    z = np.empty((T, params.d))
    x = np.empty((T, params.m))
    z[0] = params.mu0 + Lp @ rng.standard_normal(params.d)
    for t in range(T):
        if t:
            z[t] = params.A @ z[t - 1] + Lq @ rng.standard_normal(params.d)
        x[t] = params.C @ z[t] + Lr @ rng.standard_normal(params.m)
    return z, x


# ---- observation-only normal equations ----------------------------------------


@dataclass
class RankReport:
    rank: int
    size: int
    sigma_min: float
    sigma_max: float

    @property
    def deficient(self) -> bool:
        return self.rank < self.size


def numerical_rank(M: np.ndarray, rtol: float = RANK_RTOL) -> RankReport:
    s = np.linalg.svd(M, compute_uv=False)
    smax = float(s[0]) if s.size else 0.0
    return RankReport(int((s > rtol * smax).sum()), M.shape[0], float(s[-1]) if s.size else 0.0, smax)


def obs_only_normal_system(params: SSMParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, RankReport]:
    """B = Cb' Rb^-1 Cb and h_data = Cb' Rb^-1 x for the stacked trajectory."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    T = x.shape[0]
    Rinv = np.linalg.inv(params.R)
    Cb = np.kron(np.eye(T), params.C)
    Rb_inv = np.kron(np.eye(T), Rinv)
    B = Cb.T @ Rb_inv @ Cb
    h = Cb.T @ Rb_inv @ x.reshape(-1)
    return B, h, numerical_rank(B)


def min_norm_obs_only(params: SSMParams, x: np.ndarray) -> np.ndarray:
    """Minimum-norm solution of the singular observation-only normal equations."""
    B, h, _ = obs_only_normal_system(params, x)
    return (np.linalg.pinv(B, rcond=RANK_RTOL) @ h).reshape(-1, params.d)


# ---- MAP system ---------------------------------------------------------------


@dataclass
class MapSystem:
    """H = B + D_dyn and h = h_data + h_init, dense plus block-tridiagonal views."""

    H: np.ndarray
    h: np.ndarray
    T: int
    d: int
    diag: np.ndarray = field(repr=False)  # (T, d, d)
    lower: np.ndarray = field(repr=False)  # (T-1, d, d): block (t+1, t)

    def objective(self, z: np.ndarray) -> float:
        v = np.asarray(z, dtype=np.float64).reshape(-1)
        return 0.5 * v @ self.H @ v - self.h @ v


def dynamic_prior(params: SSMParams, T: int) -> tuple[np.ndarray, np.ndarray]:
    """D_dyn (dense, Td x Td) and h_init."""
    d = params.d
    Qi = np.linalg.inv(params.Q)
    P0i = np.linalg.inv(params.P0)
    AtQiA = params.A.T @ Qi @ params.A
    D = np.zeros((T * d, T * d))
    for t in range(T):
        blk = slice(t * d, (t + 1) * d)
        first = P0i if t == 0 else Qi
        D[blk, blk] = first + (AtQiA if t < T - 1 else 0.0)
        if t < T - 1:
            nxt = slice((t + 1) * d, (t + 2) * d)
            D[blk, nxt] = -params.A.T @ Qi
            D[nxt, blk] = -Qi @ params.A
    h_init = np.zeros(T * d)
    h_init[:d] = P0i @ params.mu0
    return D, h_init


def build_map_system(params: SSMParams, x: np.ndarray) -> MapSystem:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    T, d = x.shape[0], params.d
    if T < 1:
        raise ValueError("T must be >= 1")
    B, h_data, _ = obs_only_normal_system(params, x)
    D, h_init = dynamic_prior(params, T)
    H = B + D
    diag = np.stack([H[t * d:(t + 1) * d, t * d:(t + 1) * d] for t in range(T)])
    lower = np.stack([H[(t + 1) * d:(t + 2) * d, t * d:(t + 1) * d] for t in range(T - 1)]) if T > 1 \
        else np.zeros((0, d, d))
    return MapSystem(H, h_data + h_init, T, d, diag, lower)


def block_cholesky(system: MapSystem) -> tuple[np.ndarray, np.ndarray]:
    """Factor H = L L' with L block lower-bidiagonal.

    Returns the diagonal Cholesky factors ``Ld`` (T, d, d) and the sub-diagonal
    blocks ``M`` (T-1, d, d). Costs O(T d^3).
    """
    T, d = system.T, system.d
    Ld = np.empty((T, d, d))
    M = np.empty((max(T - 1, 0), d, d))
    S = system.diag[0]
    for t in range(T):
        try:
            Ld[t] = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise ConditioningError(f"MAP system is not positive definite (block {t + 1})") from exc
        if t < T - 1:
            # M_t = lower_t @ Ld_t^{-T}
            M[t] = sla.solve_triangular(Ld[t], system.lower[t].T, lower=True).T
            S = system.diag[t + 1] - M[t] @ M[t].T
    return Ld, M


def solve_map(system: MapSystem) -> np.ndarray:
    """Unique minimiser of J, shape (T, d)."""
    T, d = system.T, system.d
    Ld, M = block_cholesky(system)
    h = system.h.reshape(T, d)
    y = np.empty((T, d))
    for t in range(T):
        rhs = h[t] - (M[t - 1] @ y[t - 1] if t else 0.0)
        y[t] = sla.solve_triangular(Ld[t], rhs, lower=True)
    z = np.empty((T, d))
    for t in range(T - 1, -1, -1):
        rhs = y[t] - (M[t].T @ z[t + 1] if t < T - 1 else 0.0)
        z[t] = sla.solve_triangular(Ld[t], rhs, lower=True, trans="T")
    return z


def is_positive_definite(M: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        return False
    return True


# ---- independent oracle -------------------------------------------------------


def kalman_filter(params: SSMParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Filtered and one-step predicted means/covariances."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    T, d = x.shape[0], params.d
    A, C, Q, R = params.A, params.C, params.Q, params.R
    mf, Pf = np.empty((T, d)), np.empty((T, d, d))
    mp, Pp = np.empty((T, d)), np.empty((T, d, d))
    mean, cov = params.mu0, params.P0
    for t in range(T):
        if t:
            mean = A @ mf[t - 1]
            cov = A @ Pf[t - 1] @ A.T + Q
        mp[t], Pp[t] = mean, cov
        S = C @ cov @ C.T + R
        K = np.linalg.solve(S, C @ cov).T
        mf[t] = mean + K @ (x[t] - C @ mean)
        I_KC = np.eye(d) - K @ C
        Pf[t] = I_KC @ cov @ I_KC.T + K @ R @ K.T
    return mf, Pf, mp, Pp


def rts_smoother(params: SSMParams, x: np.ndarray) -> np.ndarray:
    """Posterior means E[z_t | x_1..x_T] by forward filtering and backward smoothing."""
    mf, Pf, mp, Pp = kalman_filter(params, x)
    T = mf.shape[0]
    ms = mf.copy()
    for t in range(T - 2, -1, -1):
        G = np.linalg.solve(Pp[t + 1], params.A @ Pf[t]).T
        ms[t] = mf[t] + G @ (ms[t + 1] - mp[t + 1])
    return ms


# ---- verification report ------------------------------------------------------


@dataclass
class InstanceCheck:
    d: int
    m: int
    T: int
    rank: int
    rank_bound: int
    map_vs_smoother: float
    residual: float
    pd: bool

    @property
    def ok(self) -> bool:
        return (self.pd and self.rank <= self.rank_bound < self.d * self.T
                and self.map_vs_smoother < 1e-8 and self.residual <= 1e-9)


def check_instance(params: SSMParams, T: int, seed) -> InstanceCheck:
    _, x = simulate(params, T, seed)
    B, _, report = obs_only_normal_system(params, x)
    system = build_map_system(params, x)
    pd = is_positive_definite(system.H)
    z = solve_map(system)
    rel_res = np.linalg.norm(system.H @ z.reshape(-1) - system.h) / max(np.linalg.norm(system.h), 1e-300)
    diff = float(np.abs(z - rts_smoother(params, x)).max())
    return InstanceCheck(params.d, params.m, T, report.rank, params.m * T, diff, float(rel_res), pd)


def verify(n_instances: int = 100, seed: int = 0, max_d: int = 6, max_T: int = 50) -> list[InstanceCheck]:
    """Random valid instances with d <= max_d, m < d, T <= max_T."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_instances):
        d = int(rng.integers(2, max_d + 1))
        m = int(rng.integers(1, d))
        T = int(rng.integers(1, max_T + 1))
        params = random_params(d, m, rng)
        params.check()
        out.append(check_instance(params, T, np.random.SeedSequence([seed, i])))
    return out
