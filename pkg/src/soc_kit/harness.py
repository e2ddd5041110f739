"""Closed-loop execution and Monte Carlo evaluation.

Rollouts apply u_k = ubar_k - L_k * da_k on the stochastic plant, with the
ROM deviation estimate updated by the synthesized Kalman gains.  Noise is
keyed by (seed, step), so paired comparisons (closed vs open loop, or
different noise scales) reuse identical draws.  Realized cost is the
tracking functional evaluated on states (states carry no covariance, so
the q_cov term contributes nothing); the nominal reference cost is the
same functional on the nominal trajectory, which a zero-noise rollout
reproduces exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rngstreams
from .enkf import GaussianBelief
from .exceptions import ContractViolationError, DivergenceError
from .lqg import LqgController
from .plant import Plant
from .trajopt import CostSpec, NominalTrajectory
from .tvera import LtvModel


@dataclass
class RolloutRecord:
    """One executed trajectory: states x_0..x_N, applied controls,
    observations y_1..y_N, ROM estimates da_0..da_N, realized cost."""

    states: np.ndarray        # (N+1, n_x)
    controls: np.ndarray      # (N, n_u)
    observations: np.ndarray  # (N, n_y), rows are y_1..y_N
    rom_estimates: np.ndarray  # (N+1, n_r)
    cost: float
    seed: int


@dataclass
class Theorem1Row:
    scale: float
    mean_dj: float
    se_dj: float
    n_runs: int


@dataclass
class MonteCarloStats:
    """Aggregates over a batch of paired closed/open-loop rollouts."""

    n_runs: int
    failures: int
    mean_traj: np.ndarray      # (N+1, n_x) closed-loop mean
    std_traj: np.ndarray       # (N+1, n_x) closed-loop std (ddof=1)
    probe_indices: list[int]
    probe_rms_closed: list[float]
    probe_rms_open: list[float]
    band_fractions: dict[int, float]   # checkpoint step -> fraction in band
    band_tolerance: float
    mean_cost_closed: float
    mean_cost_open: float
    complexity_ratio: float
    open_mean_traj: np.ndarray = field(default=None, repr=False)
    open_std_traj: np.ndarray = field(default=None, repr=False)


def realized_cost(states: np.ndarray, controls: np.ndarray,
                  cost: CostSpec) -> float:
    """Tracking + control + terminal cost of a state trajectory."""
    states = np.atleast_2d(np.asarray(states, float))
    N = states.shape[0] - 1
    traces = np.zeros(N + 1)
    total = cost.control_cost(np.atleast_2d(np.asarray(controls, float)))
    for k in range(cost.hold_from, N + 1):
        total += float(cost.belief_step_cost(states[k], traces[k], k, N)[0])
    return total


def nominal_reference_cost(nominal: NominalTrajectory, cost: CostSpec) -> float:
    """Realized cost of the nominal trajectory (zero-noise fixed point)."""
    return realized_cost(nominal.mean_states, nominal.controls, cost)


def _noise_factors(plant: Plant, b0: GaussianBelief, noise_scale: float):
    root = np.sqrt(noise_scale)
    return (root * rngstreams.covariance_factor(plant.spec.W),
            root * rngstreams.covariance_factor(plant.spec.V),
            root * rngstreams.covariance_factor(b0.covariance))


def _rollout_batch(plant: Plant, nominal: NominalTrajectory, model: LtvModel,
                   controller: LqgController, seeds, cost: CostSpec, *,
                   feedback: bool = True, sample_x0: bool = True,
                   noise_scale: float = 1.0, _isolating: bool = False):
    """Lockstep batch of rollouts; returns (records, failed_seeds)."""
    spec = plant.spec
    N, n_x, n_u, n_y = spec.N, spec.n_x, spec.n_u, spec.n_y
    n_r = model.n_r
    seeds = [int(s) for s in seeds]
    R = len(seeds)
    b0 = nominal.beliefs[0]
    fw, fv, fx0 = _noise_factors(plant, b0, noise_scale)

    x = np.repeat(b0.mean[None, :], R, axis=0)
    if sample_x0:
        for r, s in enumerate(seeds):
            z = rngstreams.stream(s, rngstreams.INITIAL_STATE).standard_normal(n_x)
            x[r] = x[r] + fx0 @ z
    states = np.empty((R, N + 1, n_x))
    controls = np.empty((R, N, n_u))
    observations = np.empty((R, N, n_y))
    rom_estimates = np.zeros((R, N + 1, n_r))
    states[:, 0] = x
    a_hat = np.zeros((R, n_r))

    triples = [model.triple(k, clamp=True) for k in range(N + 1)]
    try:
        for k in range(N):
            A_k, B_k, _ = triples[k]
            _, _, C_next = triples[k + 1]
            if feedback:
                du = -(a_hat @ controller.L[k].T)
            else:
                du = np.zeros((R, n_u))
            u = nominal.controls[k] + du
            w = np.stack([rngstreams.stream(s, rngstreams.PROCESS, k)
                          .standard_normal(n_u) for s in seeds]) @ fw.T
            v = np.stack([rngstreams.stream(s, rngstreams.MEASUREMENT, k + 1)
                          .standard_normal(n_y) for s in seeds]) @ fv.T
            x = plant.step_many(x, u, w)
            y = plant.observe_many(x, v)
            dy = y - nominal.nominal_observations[k + 1]
            pred = a_hat @ A_k.T + du @ B_k.T
            a_hat = pred + (dy - pred @ C_next.T) @ controller.K[k + 1].T
            states[:, k + 1] = x
            controls[:, k] = u
            observations[:, k] = y
            rom_estimates[:, k + 1] = a_hat
    except DivergenceError as err:
        if _isolating or R == 1:
            raise DivergenceError(f"rollout seed {seeds[0]} diverged",
                                  step=err.step) from err
        # isolate the failing rollouts one by one
        records, failed = [], []
        for s in seeds:
            try:
                rec, _ = _rollout_batch(plant, nominal, model, controller, [s],
                                        cost, feedback=feedback,
                                        sample_x0=sample_x0,
                                        noise_scale=noise_scale,
                                        _isolating=True)
                records.extend(rec)
            except DivergenceError:
                failed.append(s)
        return records, failed

    records = [RolloutRecord(states=states[r], controls=controls[r],
                             observations=observations[r],
                             rom_estimates=rom_estimates[r],
                             cost=realized_cost(states[r], controls[r], cost),
                             seed=seeds[r])
               for r in range(R)]
    return records, []


def run_closed_loop(plant: Plant, nominal: NominalTrajectory, model: LtvModel,
                    controller: LqgController, seed: int, cost: CostSpec, *,
                    feedback: bool = True, sample_x0: bool = True,
                    noise_scale: float = 1.0) -> RolloutRecord:
    """Execute the separated controller once on the stochastic plant."""
    records, failed = _rollout_batch(plant, nominal, model, controller, [seed],
                                     cost, feedback=feedback,
                                     sample_x0=sample_x0,
                                     noise_scale=noise_scale)
    if failed:
        raise DivergenceError(f"rollout seed {failed[0]} diverged")
    return records[0]


def monte_carlo(plant: Plant, nominal: NominalTrajectory, model: LtvModel,
                controller: LqgController, n_runs: int, base_seed: int,
                cost: CostSpec, *, probe_fractions=(0.4, 0.9),
                band_tolerance: float = 3.0, band_checkpoints=(),
                sample_x0: bool = True, noise_scale: float = 1.0,
                threads: int = 1) -> MonteCarloStats:
    """Paired closed/open-loop Monte Carlo evaluation.

    Open-loop rollouts reuse the closed-loop noise (identical seeds), so
    probe-error comparisons isolate the effect of feedback.
    """
    if n_runs < 2:
        raise ContractViolationError("n_runs must be >= 2")
    spec = plant.spec
    seeds = [base_seed + i for i in range(n_runs)]

    def run(feedback: bool):
        records, failed = [], []
        chunks = np.array_split(np.asarray(seeds), max(1, threads))
        chunks = [c for c in chunks if c.size]
        if threads > 1 and len(chunks) > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outs = list(pool.map(
                    lambda c: _rollout_batch(plant, nominal, model, controller,
                                             list(c), cost, feedback=feedback,
                                             sample_x0=sample_x0,
                                             noise_scale=noise_scale), chunks))
        else:
            outs = [_rollout_batch(plant, nominal, model, controller, list(c),
                                   cost, feedback=feedback, sample_x0=sample_x0,
                                   noise_scale=noise_scale) for c in chunks]
        for recs, fails in outs:
            records.extend(recs)
            failed.extend(fails)
        return records, failed

    closed, failed_c = run(feedback=True)
    open_, failed_o = run(feedback=False)
    failed = sorted(set(failed_c) | set(failed_o))
    # keep the pairing: drop any seed that failed under either policy
    closed = [r for r in closed if r.seed not in failed]
    open_ = [r for r in open_ if r.seed not in failed]
    if len(closed) < 2:
        raise DivergenceError(
            f"fewer than 2 surviving rollouts ({len(failed)} failures)")

    cl_states = np.stack([r.states for r in closed])
    op_states = np.stack([r.states for r in open_])
    mean_traj = cl_states.mean(axis=0)
    std_traj = cl_states.std(axis=0, ddof=1)

    probe_idx = [int(np.rint(f * (spec.n_x - 1))) for f in probe_fractions]
    nom = nominal.mean_states
    rms_closed = [float(np.sqrt(np.mean((cl_states[:, :, i] - nom[:, i]) ** 2)))
                  for i in probe_idx]
    rms_open = [float(np.sqrt(np.mean((op_states[:, :, i] - nom[:, i]) ** 2)))
                for i in probe_idx]

    band = {}
    for k in band_checkpoints:
        dev = np.abs(mean_traj[int(k)] - cost.target)
        band[int(k)] = float(np.mean(dev <= band_tolerance))

    return MonteCarloStats(
        n_runs=n_runs, failures=len(failed),
        mean_traj=mean_traj, std_traj=std_traj,
        probe_indices=probe_idx,
        probe_rms_closed=rms_closed, probe_rms_open=rms_open,
        band_fractions=band, band_tolerance=band_tolerance,
        mean_cost_closed=float(np.mean([r.cost for r in closed])),
        mean_cost_open=float(np.mean([r.cost for r in open_])),
        complexity_ratio=float(spec.n_x) ** 4 / float(model.n_r) ** 2,
        open_mean_traj=op_states.mean(axis=0),
        open_std_traj=op_states.std(axis=0, ddof=1),
    )


def theorem1_check(plant: Plant, nominal: NominalTrajectory, model: LtvModel,
                   controller: LqgController, cost: CostSpec, noise_scales,
                   n_runs: int, seed: int, *,
                   sample_x0: bool = True) -> list[Theorem1Row]:
    """Estimate the mean realized-cost deviation from nominal per noise scale.

    Scales reuse the same seeds (and therefore the same underlying standard
    normal draws), so the comparison across scales is paired.  The
    first-order separation claim predicts the mean deviation shrinks faster
    than its spread as the scale goes to zero.
    """
    j_bar = nominal_reference_cost(nominal, cost)
    seeds = [seed + i for i in range(n_runs)]
    rows = []
    for s in noise_scales:
        records, failed = _rollout_batch(plant, nominal, model, controller,
                                         seeds, cost, feedback=True,
                                         sample_x0=sample_x0,
                                         noise_scale=float(s))
        dj = np.array([r.cost - j_bar for r in records])
        se = float(dj.std(ddof=1) / np.sqrt(dj.size)) if dj.size > 1 else 0.0
        rows.append(Theorem1Row(scale=float(s), mean_dj=float(dj.mean()),
                                se_dj=se, n_runs=dj.size))
    return rows
