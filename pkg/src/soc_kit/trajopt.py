"""Open-loop trajectory optimization in belief space.

The nominal cost is a quadratic belief-space tracking objective evaluated
on EnKF-propagated beliefs; its gradient is estimated by forward
differences with common random numbers (the same EnKF seed for every
perturbed evaluation), and controls are improved by gradient descent with
an optional backtracking line search.

Perturbing the control at step i leaves the belief trajectory up to step i
bit-identical (noise is keyed by step and member), so the gradient is
computed with a growing lockstep batch: the perturbed propagation for step
i forks off the base ensemble when step i is reached.  This is exact, not
an approximation, and avoids re-simulating shared prefixes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .enkf import EnsembleSimulator, GaussianBelief, enkf_propagate, _check_controls
from .exceptions import ContractViolationError, StallError
from .plant import Plant, check_psd


@dataclass
class CostSpec:
    """Quadratic belief-space cost.

    J = sum_{k=hold_from}^{N-1} [(mu_k - target)' Q_track (mu_k - target)
        + q_cov * tr(Sigma_k)] + sum_{k=0}^{N-1} u_k' R_ctrl u_k
        + (mu_N - target)' Q_term (mu_N - target)
    """

    Q_track: np.ndarray
    q_cov: float
    R_ctrl: np.ndarray
    Q_term: np.ndarray
    target: np.ndarray
    hold_from: int = 0

    def __post_init__(self):
        self.Q_track = check_psd(np.atleast_2d(np.asarray(self.Q_track, float)),
                                 "Q_track")
        self.Q_term = check_psd(np.atleast_2d(np.asarray(self.Q_term, float)),
                                "Q_term")
        # R_ctrl is nominally positive definite, but degenerate test costs
        # legitimately set it to zero, so only PSD is enforced.
        self.R_ctrl = check_psd(np.atleast_2d(np.asarray(self.R_ctrl, float)),
                                "R_ctrl")
        self.target = np.asarray(self.target, float).reshape(-1)
        self.q_cov = float(self.q_cov)
        if self.hold_from < 0:
            raise ContractViolationError("hold_from must be >= 0")

    @property
    def has_belief_terms(self) -> bool:
        return bool(np.any(self.Q_track) or self.q_cov != 0.0 or np.any(self.Q_term))

    def _quad(self, means: np.ndarray, Q: np.ndarray) -> np.ndarray:
        d = means - self.target
        if np.count_nonzero(Q - np.diag(np.diagonal(Q))) == 0:
            return (d * d) @ np.diagonal(Q)
        return np.einsum("...i,ij,...j->...", d, Q, d)

    def belief_step_cost(self, means: np.ndarray, traces: np.ndarray, k: int,
                         N: int) -> np.ndarray:
        """Belief-dependent cost contribution of step k (vectorized)."""
        means = np.atleast_2d(means)
        traces = np.atleast_1d(traces)
        if k == N:
            return self._quad(means, self.Q_term)
        if k >= self.hold_from:
            return self._quad(means, self.Q_track) + self.q_cov * traces
        return np.zeros(means.shape[0])

    def control_cost(self, controls: np.ndarray) -> float:
        return float(np.einsum("ki,ij,kj->", controls, self.R_ctrl, controls))


@dataclass
class GradientConfig:
    """Gradient-descent parameters: step size, FD perturbation, stopping."""

    alpha: float = 1e-3
    h: float = 1e-4
    epsilon: float = 1e-6
    max_iters: int = 100
    line_search: bool = True

    def __post_init__(self):
        if self.alpha <= 0 or self.h <= 0 or self.epsilon <= 0:
            raise ContractViolationError("alpha, h and epsilon must be > 0")
        if self.max_iters < 1:
            raise ContractViolationError("max_iters must be >= 1")


@dataclass
class NominalTrajectory:
    """Optimized open-loop solution.

    ``mean_states`` is the noiseless state trajectory generated by the
    optimized controls (the linearization point for system identification);
    ``nominal_observations`` are its noise-free outputs, rows 0..N.
    """

    controls: np.ndarray                 # (N, n_u)
    beliefs: list[GaussianBelief]        # length N+1
    nominal_observations: np.ndarray     # (N+1, n_y)
    cost: float
    mean_states: np.ndarray              # (N+1, n_x)


@dataclass
class OpenLoopResult:
    trajectory: NominalTrajectory
    converged: bool
    iterations: int
    grad_norm: float
    cost_history: list[float] = field(default_factory=list)


def nominal_cost(beliefs, controls, cost: CostSpec) -> float:
    """Evaluate the nominal belief-space cost for b_0..b_N and u_0..u_{N-1}."""
    N = len(beliefs) - 1
    controls = np.atleast_2d(np.asarray(controls, float))
    if controls.shape[0] != N:
        raise ContractViolationError(
            f"expected {N} controls for {N + 1} beliefs, got {controls.shape[0]}")
    if cost.hold_from > N:
        raise ContractViolationError("hold_from must be <= N")
    means = np.stack([b.mean for b in beliefs])
    traces = np.array([b.trace for b in beliefs])
    if not (np.all(np.isfinite(means)) and np.all(np.isfinite(traces))
            and np.all(np.isfinite(controls))):
        raise ContractViolationError("non-finite beliefs or controls")
    return _cost_from_stats(means, traces, controls, cost)


def _cost_from_stats(means, traces, controls, cost: CostSpec) -> float:
    N = means.shape[0] - 1
    total = cost.control_cost(controls)
    for k in range(cost.hold_from, N + 1):
        total += float(cost.belief_step_cost(means[k], traces[k], k, N)[0])
    return total


def _propagate_stats(plant: Plant, b0: GaussianBelief, controls: np.ndarray,
                     m: int, seed: int):
    """One EnKF propagation returning per-step means and covariance traces."""
    sim = EnsembleSimulator(plant, m, seed)
    members, xbar = sim.alloc(b0, batch=1)
    N = plant.spec.N
    means = np.empty((N + 1, plant.spec.n_x))
    traces = np.empty(N + 1)
    means[0] = b0.mean
    traces[0] = b0.trace
    for k in range(N):
        mu, _, tr = sim.step(members, xbar, k, controls[k:k + 1], 1)
        means[k + 1] = mu[0]
        traces[k + 1] = tr[0]
    return means, traces


def fd_gradient(plant: Plant, b0: GaussianBelief, controls: np.ndarray,
                cost: CostSpec, h: float, m: int, seed: int) -> np.ndarray:
    """Forward-difference gradient of the nominal cost, flattened to N*n_u.

    Component (i, c) is (J(u_{i,c} + h) - J(u)) / h with every evaluation
    sharing the same seed.  The quadratic control term is differenced in
    closed form ((u+h)'R(u+h) - u'Ru = h(2Ru + hR_cc)), which equals the
    forward difference exactly; the belief terms are simulated.
    """
    if h <= 0:
        raise ContractViolationError("h must be > 0")
    U = _check_controls(plant, controls)
    R = cost.R_ctrl
    grad = 2.0 * U @ R + h * np.diagonal(R)[None, :]
    if cost.has_belief_terms:
        grad = grad + _belief_fd(plant, b0, U, cost, h, m, seed)[0]
    return grad.ravel()


def _belief_fd(plant: Plant, b0: GaussianBelief, U: np.ndarray, cost: CostSpec,
               h: float, m: int, seed: int):
    """Belief-cost part of the FD gradient via a growing lockstep batch.

    Returns (gradient (N, n_u), base cost including control term).
    """
    spec = plant.spec
    N, n_u = spec.N, spec.n_u
    if cost.hold_from > N:
        raise ContractViolationError("hold_from must be <= N")
    total = 1 + N * n_u
    sim = EnsembleSimulator(plant, m, seed)
    members, xbar = sim.alloc(b0, total)
    base_bcost = np.zeros(N + 1)
    suffix = np.zeros(total)
    for k in range(N):
        a0 = 1 + k * n_u
        n_active = a0 + n_u
        members[a0:n_active] = members[0]
        xbar[a0:n_active] = xbar[0]
        ctrl = np.repeat(U[k][None, :], n_active, axis=0)
        ctrl[np.arange(a0, n_active), np.arange(n_u)] += h
        means, _, traces = sim.step(members, xbar, k, ctrl, n_active)
        bc = cost.belief_step_cost(means, traces, k + 1, N)
        if not np.all(np.isfinite(bc)):
            bad = int(np.argmax(~np.isfinite(bc)))
            raise ContractViolationError(
                f"non-finite perturbed cost for control index {bad - 1}"
                if bad else "non-finite base cost")
        base_bcost[k + 1] = bc[0]
        suffix[1:n_active] += bc[1:n_active]
    tail = np.concatenate([np.cumsum(base_bcost[::-1])[::-1], [0.0]])
    act_step = np.repeat(np.arange(N), n_u)
    grad = (suffix[1:] - tail[act_step + 1]) / h
    base_total = tail[0] + cost.control_cost(U)
    if cost.hold_from == 0:
        base_total += float(cost.belief_step_cost(b0.mean, b0.trace, 0, N)[0])
    return grad.reshape(N, n_u), base_total


def optimize_open_loop(plant: Plant, b0: GaussianBelief, U0: np.ndarray,
                       cost: CostSpec, cfg: GradientConfig, m: int,
                       seed: int) -> OpenLoopResult:
    """Gradient-descent open-loop optimization of the nominal cost.

    Iterates U <- U - alpha * grad (with backtracking halving of alpha when
    line_search is enabled) until the max-norm of the gradient drops below
    cfg.epsilon or max_iters is reached; returns the best iterate found.
    """
    U = _check_controls(plant, U0).copy()
    evaluate = lambda ctrls: _cost_from_stats(
        *_propagate_stats(plant, b0, ctrls, m, seed), ctrls, cost)
    J = evaluate(U)
    best_U, best_J = U.copy(), J
    history = [J]
    converged = False
    grad_norm = np.inf
    iterations = 0
    trial = cfg.alpha
    for iterations in range(1, cfg.max_iters + 1):
        g = fd_gradient(plant, b0, U, cost, cfg.h, m, seed).reshape(U.shape)
        grad_norm = float(np.abs(g).max())
        if grad_norm < cfg.epsilon:
            converged = True
            iterations -= 1
            break
        if cfg.line_search:
            # trial step grows from the last accepted one, then backtracks
            step = trial
            for _ in range(30):
                U_try = U - step * g
                J_try = evaluate(U_try)
                if J_try <= J:
                    U, J = U_try, J_try
                    trial = 2.0 * step
                    break
                step *= 0.5
            else:
                raise StallError(
                    f"line search found no decrease after 30 halvings "
                    f"(iteration {iterations}, cost {J:.6g})")
        else:
            U = U - cfg.alpha * g
            J = evaluate(U)
        history.append(J)
        if J < best_J:
            best_U, best_J = U.copy(), J
    trajectory = _finalize(plant, b0, best_U, cost, m, seed)
    return OpenLoopResult(trajectory=trajectory, converged=converged,
                          iterations=iterations, grad_norm=grad_norm,
                          cost_history=history)


def nominal_rollout(plant: Plant, x0: np.ndarray, controls: np.ndarray):
    """Noiseless state/observation trajectory under a control sequence."""
    spec = plant.spec
    states = np.empty((spec.N + 1, spec.n_x))
    obs = np.empty((spec.N + 1, spec.n_y))
    zero_w = np.zeros(spec.n_u)
    zero_v = np.zeros(spec.n_y)
    states[0] = x0
    obs[0] = plant.observe(states[0], zero_v)
    for k in range(spec.N):
        states[k + 1] = plant.step(states[k], controls[k], zero_w)
        obs[k + 1] = plant.observe(states[k + 1], zero_v)
    return states, obs


def _finalize(plant, b0, U, cost, m, seed) -> NominalTrajectory:
    beliefs = enkf_propagate(plant, b0, U, m, seed)
    states, obs = nominal_rollout(plant, b0.mean, U)
    return NominalTrajectory(controls=U, beliefs=beliefs,
                             nominal_observations=obs,
                             cost=nominal_cost(beliefs, U, cost),
                             mean_states=states)
