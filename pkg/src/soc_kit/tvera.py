"""Time-varying ERA: identify the reduced-order LTV deviation system.

The deviation system around the optimized nominal trajectory is probed
with single-channel impulse experiments on the noiseless plant, its
generalized Markov parameters are estimated from the recorded output
deviations, and per-step SVD factorizations of generalized Hankel matrices
yield reduced-order triples (A_k, B_k, C_k) that reproduce the measured
Markov parameters (partial realization).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import (ContractViolationError, DivergenceError,
                         UnderdeterminedError)
from .plant import Plant
from .trajopt import NominalTrajectory

PINV_RCOND = 1e-10


@dataclass
class ExperimentArchive:
    """Input/output deviation records from identification experiments.

    ``delta_u`` has shape (n_exp, N, n_u) and ``delta_y`` (n_exp, N+1, n_y);
    outputs at step 0 are always zero (the deviation system starts at rest).
    ``impulse`` marks archives generated by single-(step, channel) impulses
    of common ``magnitude``, for which the least squares collapses to a
    per-channel division.
    """

    delta_u: np.ndarray
    delta_y: np.ndarray
    magnitude: float | None = None
    impulse: bool = False

    def __post_init__(self):
        if self.delta_u.ndim != 3 or self.delta_y.ndim != 3:
            raise ContractViolationError("archive arrays must be 3-D")
        if self.delta_u.shape[0] != self.delta_y.shape[0]:
            raise ContractViolationError("experiment counts disagree")

    @property
    def n_experiments(self) -> int:
        return self.delta_u.shape[0]


@dataclass
class MarkovParameterSet:
    """Generalized Markov parameters h_{k,j} for 0 <= j < k <= N.

    Stored densely as ``blocks[k, j]`` of shape (n_y, n_u); entries with
    j >= k are zero by causality and never read.
    """

    blocks: np.ndarray  # (N+1, N, n_y, n_u)

    def __post_init__(self):
        if self.blocks.ndim != 4:
            raise ContractViolationError("blocks must be (N+1, N, n_y, n_u)")
        if not np.all(np.isfinite(self.blocks)):
            raise ContractViolationError("Markov parameters must be finite")

    @property
    def N(self) -> int:
        return self.blocks.shape[1]

    @property
    def n_y(self) -> int:
        return self.blocks.shape[2]

    @property
    def n_u(self) -> int:
        return self.blocks.shape[3]

    def block(self, k: int, j: int) -> np.ndarray:
        if not 0 <= j < k <= self.N:
            raise ContractViolationError(
                f"h_(k={k}, j={j}) outside causal range 0 <= j < k <= {self.N}")
        return self.blocks[k, j]


@dataclass
class HankelConfig:
    """Hankel sizing and rank-selection parameters."""

    p: int = 15
    q: int = 15
    rank_tol: float = 1e-6
    n_r_fixed: int | None = None

    def __post_init__(self):
        if self.p < 1 or self.q < 1:
            raise ContractViolationError("p and q must be >= 1")
        if not 0.0 < self.rank_tol < 1.0:
            raise ContractViolationError("rank_tol must lie in (0, 1)")
        if self.n_r_fixed is not None and self.n_r_fixed < 1:
            raise ContractViolationError("n_r_fixed must be >= 1")


@dataclass
class LtvModel:
    """Identified reduced-order LTV triples over a valid step window.

    ``A_hat[k]``, ``B_hat[k]``, ``C_hat[k]`` are indexed by absolute step
    via ``triple``; outside ``valid_range`` the nearest valid triple is
    substituted when clamping is requested (closed-loop execution), else an
    error is raised.
    """

    A_hat: dict[int, np.ndarray]
    B_hat: dict[int, np.ndarray]
    C_hat: dict[int, np.ndarray]
    n_r: int
    valid_range: tuple[int, int]  # inclusive
    singular_values: np.ndarray = field(default=None, repr=False)

    def _key(self, k: int, clamp: bool) -> int:
        lo, hi = self.valid_range
        if lo <= k <= hi:
            return k
        if clamp:
            return min(max(k, lo), hi)
        raise ContractViolationError(
            f"step {k} outside realization window [{lo}, {hi}]")

    def triple(self, k: int, *, clamp: bool = False):
        key = self._key(k, clamp)
        return self.A_hat[key], self.B_hat[key], self.C_hat[key]


def run_impulse_experiments(plant: Plant, nominal: NominalTrajectory,
                            magnitude: float, *,
                            threads: int = 1) -> ExperimentArchive:
    """Probe the deviation system with one impulse per (step, channel).

    For each step i < N and input channel c, the noiseless plant is run
    under the nominal controls with ``magnitude`` added to channel c at
    step i; recorded deviations are y_k - ybar_k.  Experiments share a
    lockstep batch (optionally split across threads).
    """
    if magnitude < 0:
        raise ContractViolationError("impulse magnitude must be >= 0")
    spec = plant.spec
    N, n_u, n_y = spec.N, spec.n_u, spec.n_y
    n_exp = N * n_u
    delta_u = np.zeros((n_exp, N, n_u))
    idx = np.arange(n_exp)
    delta_u[idx, idx // n_u, idx % n_u] = magnitude

    def simulate(rows: np.ndarray) -> np.ndarray:
        # the last batch row replays the unperturbed nominal: deviations are
        # differences along an identical computational path, so a zero
        # impulse yields exactly zero
        B = rows.size + 1
        states = np.repeat(nominal.mean_states[0][None, :], B, axis=0)
        dy = np.zeros((rows.size, N + 1, n_y))
        zeros_w = np.zeros((B, n_u))
        zeros_v = np.zeros((B, n_y))
        for k in range(N):
            ctrl = np.repeat(nominal.controls[k][None, :], B, axis=0)
            ctrl[:-1] += delta_u[rows, k, :]
            try:
                states = plant.step_many(states, ctrl, zeros_w)
            except DivergenceError as err:
                raise DivergenceError(
                    "impulse experiment diverged "
                    f"(impulse steps {rows // n_u}, channels {rows % n_u})",
                    step=k) from err
            obs = plant.observe_many(states, zeros_v)
            dy[:, k + 1, :] = obs[:-1] - obs[-1]
        return dy

    delta_y = np.empty((n_exp, N + 1, n_y))
    chunks = np.array_split(idx, max(1, threads))
    if threads > 1 and len(chunks) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for rows, dy in zip(chunks, pool.map(simulate, chunks)):
                delta_y[rows] = dy
    else:
        delta_y[idx] = simulate(idx)
    return ExperimentArchive(delta_u=delta_u, delta_y=delta_y,
                             magnitude=magnitude, impulse=magnitude > 0)


def estimate_markov(archive: ExperimentArchive) -> MarkovParameterSet:
    """Estimate generalized Markov parameters from an experiment archive.

    Impulse archives collapse to h_{k,i}[:, c] = delta_y_k^{(i,c)} / mag;
    general archives solve, per output step k, the stacked least squares
    delta_y_k = [h_{k,k-1} ... h_{k,0}] [delta_u_{k-1}; ...; delta_u_0]
    with pseudo-inverse cutoff PINV_RCOND.
    """
    n_exp, n_steps, n_y = archive.delta_y.shape
    N = n_steps - 1
    n_u = archive.delta_u.shape[2]
    blocks = np.zeros((N + 1, N, n_y, n_u))
    if archive.impulse:
        if n_exp != N * n_u:
            raise ContractViolationError(
                "impulse archive must hold one experiment per (step, channel)")
        # delta_y[e, k, :] / mag is column c of h_{k, i} for e = i * n_u + c
        resp = archive.delta_y / archive.magnitude  # (N*n_u, N+1, n_y)
        resp = resp.reshape(N, n_u, N + 1, n_y)
        blocks = np.ascontiguousarray(np.moveaxis(resp, (2, 0, 3, 1), (0, 1, 2, 3)))
        return MarkovParameterSet(blocks=blocks)
    for k in range(1, N + 1):
        # regressor rows: delta_u at steps k-1 .. 0, stacked per experiment
        U = np.concatenate([archive.delta_u[:, j, :] for j in range(k - 1, -1, -1)],
                           axis=1).T  # (k*n_u, n_exp)
        Y = archive.delta_y[:, k, :].T  # (n_y, n_exp)
        svals = np.linalg.svd(U, compute_uv=False)
        rank = int(np.sum(svals > PINV_RCOND * (svals[0] if svals.size else 1.0)))
        if rank < k * n_u:
            bad = _unidentifiable_blocks(U, k, n_u)
            raise UnderdeterminedError(
                f"regressor at output step {k} has rank {rank} < {k * n_u}; "
                f"unidentifiable blocks: {bad}", blocks=bad)
        H = Y @ np.linalg.pinv(U, rcond=PINV_RCOND)
        for col, j in enumerate(range(k - 1, -1, -1)):
            blocks[k, j] = H[:, col * n_u:(col + 1) * n_u]
    return MarkovParameterSet(blocks=blocks)


def _unidentifiable_blocks(U: np.ndarray, k: int, n_u: int) -> list[tuple[int, int]]:
    """Blocks (k, j) whose coordinate directions leave the row space of U."""
    _, svals, vt = np.linalg.svd(U.T, full_matrices=False)
    keep = svals > PINV_RCOND * (svals[0] if svals.size else 1.0)
    basis = vt[keep]  # orthonormal rows spanning the identifiable space
    bad = []
    for col, j in enumerate(range(k - 1, -1, -1)):
        sl = slice(col * n_u, (col + 1) * n_u)
        for r in range(n_u):
            e = np.zeros(U.shape[0])
            e[col * n_u + r] = 1.0
            resid = e - basis.T @ (basis @ e)
            if np.linalg.norm(resid) > 1e-8:
                bad.append((k, j))
                break
    return bad


def build_hankel(markov: MarkovParameterSet, k: int, p: int, q: int) -> np.ndarray:
    """Generalized Hankel matrix H_k with block (r, c) = h_{k+r, k-1-c}."""
    if q > k:
        raise ContractViolationError(f"need q <= k (q={q}, k={k})")
    if k + p - 1 > markov.N:
        raise ContractViolationError(
            f"need k + p - 1 <= N (k={k}, p={p}, N={markov.N})")
    n_y, n_u = markov.n_y, markov.n_u
    H = np.empty((p * n_y, q * n_u))
    for r in range(p):
        for c in range(q):
            H[r * n_y:(r + 1) * n_y, c * n_u:(c + 1) * n_u] = \
                markov.blocks[k + r, k - 1 - c]
    return H


def era_realize(markov: MarkovParameterSet, p: int, q: int,
                cfg: HankelConfig | None = None) -> LtvModel:
    """Per-step SVD partial realization over the feasible window.

    For each k in [q, N-p]: H_k = U S V' truncated at n_r, O_k = U S^1/2,
    R_{k-1} = S^1/2 V'; A_k = pinv(O_{k+1} first (p-1)n_y rows) @ (O_k last
    (p-1)n_y rows), B_k = first n_u columns of R_k, C_k = first n_y rows of
    O_k.  n_r is selected once at the reference step k = q and reused.
    """
    cfg = cfg or HankelConfig(p=p, q=q)
    N, n_y, n_u = markov.N, markov.n_y, markov.n_u
    lo, hi = q, N - p
    if hi < lo:
        raise ContractViolationError(
            f"horizon too short for p={p}, q={q}: window [{lo}, {hi}] empty")
    svd_cache: dict[int, tuple] = {}
    for k in range(lo, hi + 2):
        H = build_hankel(markov, k, p, q)
        U, s, Vt = np.linalg.svd(H, full_matrices=False)
        svd_cache[k] = (U, s, Vt)

    s_ref = svd_cache[lo][1]
    if not np.any(s_ref > 0):
        raise ContractViolationError(f"Hankel matrix at step {lo} is zero rank")
    if cfg.n_r_fixed is not None:
        n_r = cfg.n_r_fixed
    else:
        n_r = int(np.sum(s_ref >= cfg.rank_tol * s_ref[0]))
    if n_r > min(p * n_y, q * n_u):
        raise ContractViolationError(
            f"n_r={n_r} exceeds min(p*n_y, q*n_u)={min(p * n_y, q * n_u)}")

    def factors(k):
        U, s, Vt = svd_cache[k]
        root = np.sqrt(s[:n_r])
        return U[:, :n_r] * root, root[:, None] * Vt[:n_r]  # O_k, R_{k-1}

    A_hat, B_hat, C_hat = {}, {}, {}
    rows = (p - 1) * n_y
    for k in range(lo, hi + 1):
        O_k, _ = factors(k)
        O_next, R_k = factors(k + 1)
        A_hat[k] = np.linalg.pinv(O_next[:rows], rcond=PINV_RCOND) @ O_k[-rows:]
        B_hat[k] = R_k[:, :n_u]
        C_hat[k] = O_k[:n_y]
    return LtvModel(A_hat=A_hat, B_hat=B_hat, C_hat=C_hat, n_r=n_r,
                    valid_range=(lo, hi), singular_values=s_ref.copy())


def reconstruct_markov(model: LtvModel, k: int, j: int, *,
                       clamp: bool = False) -> np.ndarray:
    """Markov parameter of the realization: C_k A_{k-1} ... A_{j+1} B_j."""
    if not j < k:
        raise ContractViolationError(f"need j < k, got k={k}, j={j}")
    _, B_j, _ = model.triple(j, clamp=clamp)
    _, _, C_k = model.triple(k, clamp=clamp)
    acc = B_j
    for step in range(j + 1, k):
        A_s, _, _ = model.triple(step, clamp=clamp)
        acc = A_s @ acc
    return C_k @ acc
