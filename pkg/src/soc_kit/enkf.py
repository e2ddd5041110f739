"""Ensemble Kalman Filter belief propagation.

Propagates a Gaussian belief (mean, covariance) along a control sequence
using only the black-box plant: each step forecasts the posterior ensemble
through the stochastic dynamics, builds a perturbed measurement ensemble,
and assimilates the observation generated by the noiseless underlying
system.  Given a seed the whole trajectory is deterministic, and noise
draws are keyed by (step, member) so that propagations under perturbed
controls reuse identical noise everywhere (common random numbers).

The propagator supports batches of control sequences evolving in lockstep;
the finite-difference gradient in :mod:`soc_kit.trajopt` relies on this.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import rngstreams
from .exceptions import ContractViolationError, DivergenceError
from .plant import Plant, check_psd

EIG_FLOOR = 1e-12


@dataclass
class GaussianBelief:
    """Gaussian state estimate b = (mean, covariance)."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        n = self.mean.shape[0]
        if self.covariance.shape != (n, n):
            raise ContractViolationError(
                f"covariance must be {n}x{n}, got {self.covariance.shape}")
        check_psd(self.covariance, "belief covariance")

    @property
    def trace(self) -> float:
        return float(np.trace(self.covariance))


@dataclass
class Ensemble:
    """A set of m state samples representing one belief."""

    members: np.ndarray  # (m, n_x)

    def __post_init__(self):
        self.members = np.atleast_2d(np.asarray(self.members, dtype=float))
        if self.members.shape[0] < 2:
            raise ContractViolationError("ensemble size m must be >= 2")

    @property
    def m(self) -> int:
        return self.members.shape[0]

    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    def covariance(self) -> np.ndarray:
        anomalies = self.members - self.mean()
        return anomalies.T @ anomalies / (self.m - 1)


@dataclass
class EnkfDiagnostics:
    """Bookkeeping for numerical events during a propagation."""

    regularized_steps: list[int] = field(default_factory=list)

    @property
    def regularized(self) -> bool:
        return bool(self.regularized_steps)


def initial_ensemble(belief: GaussianBelief, m: int, seed: int) -> np.ndarray:
    """Draw m samples from the belief via Cholesky of its covariance.

    Semi-definite covariances fall back to an eigendecomposition with
    eigenvalues floored at EIG_FLOOR.
    """
    if m < 2:
        raise ContractViolationError("ensemble size m must be >= 2")
    cov = belief.covariance
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, u = np.linalg.eigh(0.5 * (cov + cov.T))
        factor = u * np.sqrt(np.clip(w, EIG_FLOOR, None))
    z = rngstreams.stream(seed, rngstreams.INIT_ENSEMBLE).standard_normal(
        (m, belief.mean.shape[0]))
    return belief.mean + z @ factor.T


class EnsembleSimulator:
    """Lockstep EnKF propagation for a batch of control sequences.

    State lives in caller-owned arrays: ``members`` (B, m, n_x) posterior
    ensembles and ``xbar`` (B, n_x) noiseless underlying states.  ``step``
    advances rows [0, n_active) in place and returns posterior mean, an
    optional full covariance, and the posterior covariance trace per row.
    All rows share the same per-(step, member) noise draws.
    """

    def __init__(self, plant: Plant, m: int, seed: int, *, reg: float = 1e-8):
        if m < 2:
            raise ContractViolationError("ensemble size m must be >= 2")
        self.plant = plant
        self.m = m
        self.seed = seed
        self.reg = reg
        self.diagnostics = EnkfDiagnostics()
        self._chol_w = rngstreams.covariance_factor(plant.spec.W)
        self._chol_v = rngstreams.covariance_factor(plant.spec.V)

    def alloc(self, belief: GaussianBelief, batch: int):
        """Allocate (members, xbar) arrays with row 0 initialized."""
        n_x = self.plant.spec.n_x
        members = np.empty((batch, self.m, n_x))
        xbar = np.empty((batch, n_x))
        members[0] = initial_ensemble(belief, self.m, self.seed)
        xbar[0] = belief.mean
        return members, xbar

    def step(self, members: np.ndarray, xbar: np.ndarray, k: int,
             controls: np.ndarray, n_active: int, *, want_cov: bool = False):
        """Advance rows [0, n_active) from step k to k+1.

        ``controls`` has shape (n_active, n_u).  Returns (means, covs,
        traces) for the posterior at step k+1; ``covs`` is None unless
        requested.
        """
        plant = self.plant
        m = self.m
        spec = plant.spec
        w = rngstreams.stream(self.seed, rngstreams.PROCESS, k).standard_normal(
            (m, spec.n_u)) @ self._chol_w.T
        v = rngstreams.stream(self.seed, rngstreams.MEASUREMENT, k).standard_normal(
            (m, spec.n_y)) @ self._chol_v.T

        X = members[:n_active]
        B = n_active
        flat_controls = np.repeat(controls, m, axis=0)
        flat_noise = np.broadcast_to(w, (B, m, spec.n_u)).reshape(-1, spec.n_u)
        try:
            Xf = plant.step_many(X.reshape(B * m, -1), flat_controls,
                                 flat_noise).reshape(B, m, -1)
        except DivergenceError as err:
            raise DivergenceError("ensemble diverged", step=k) from err
        Yf = plant.observe_many(
            Xf.reshape(B * m, -1),
            np.broadcast_to(v, (B, m, spec.n_y)).reshape(-1, spec.n_y),
        ).reshape(B, m, -1)

        # Noiseless underlying system supplies the assimilated measurement.
        xbar[:n_active] = plant.step_many(xbar[:n_active], controls,
                                          np.zeros((B, spec.n_u)))
        y = plant.observe_many(xbar[:n_active], np.zeros((B, spec.n_y)))

        mf = Xf.mean(axis=1)
        Ax = Xf - mf[:, None, :]
        ym = Yf.mean(axis=1)
        Ay = Yf - ym[:, None, :]
        denom = m - 1
        Py = np.matmul(Ay.swapaxes(1, 2), Ay) / denom
        Pxy = np.matmul(Ax.swapaxes(1, 2), Ay) / denom

        gain = self._gain(Py, Pxy, k)  # (B, n_x, n_y)

        innov = y[:, None, :] - Yf  # (B, m, n_y)
        members[:n_active] = Xf + innov @ gain.swapaxes(1, 2)
        means = mf + (gain @ (y - ym)[:, :, None])[:, :, 0]
        traces = (np.einsum("bmi,bmi->b", Ax, Ax) / denom
                  - np.einsum("bij,bij->b", gain, Pxy))
        covs = None
        if want_cov:
            covs = (np.matmul(Ax.swapaxes(1, 2), Ax) / denom
                    - gain @ Pxy.swapaxes(1, 2))
            covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
        if not np.all(np.isfinite(means)):
            raise DivergenceError("ensemble diverged", step=k)
        return means, covs, traces

    def _gain(self, Py: np.ndarray, Pxy: np.ndarray, k: int) -> np.ndarray:
        """K = Pxy Py^{-1}, regularizing singular Py with reg * I."""
        try:
            return np.linalg.solve(np.swapaxes(Py, 1, 2),
                                   np.swapaxes(Pxy, 1, 2)).swapaxes(1, 2)
        except np.linalg.LinAlgError:
            self.diagnostics.regularized_steps.append(k)
            eye = np.eye(Py.shape[-1])
            Py_reg = Py + self.reg * eye
            return np.linalg.solve(np.swapaxes(Py_reg, 1, 2),
                                   np.swapaxes(Pxy, 1, 2)).swapaxes(1, 2)


def enkf_propagate(plant: Plant, b0: GaussianBelief, controls: np.ndarray,
                   m: int, seed: int, *, reg: float = 1e-8,
                   diagnostics: EnkfDiagnostics | None = None) -> list[GaussianBelief]:
    """Propagate a belief through a control sequence; returns b_0..b_N.

    ``controls`` is (N, n_u).  The belief update follows the sample-based
    gain K = Pxy Py^{-1} with mean b+ = b- + K (y - y-) and covariance
    S+ = S- - Pxy Py^{-1} Pyx, assimilating observations of the noiseless
    underlying system.  Deterministic given (b0, controls, m, seed).
    """
    controls = _check_controls(plant, controls)
    sim = EnsembleSimulator(plant, m, seed, reg=reg)
    members, xbar = sim.alloc(b0, batch=1)
    beliefs = [GaussianBelief(b0.mean.copy(), b0.covariance.copy())]
    for k in range(plant.spec.N):
        means, covs, _ = sim.step(members, xbar, k, controls[k:k + 1], 1,
                                  want_cov=True)
        beliefs.append(GaussianBelief(means[0], covs[0]))
    if diagnostics is not None:
        diagnostics.regularized_steps.extend(sim.diagnostics.regularized_steps)
    return beliefs


def _check_controls(plant: Plant, controls: np.ndarray) -> np.ndarray:
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 1 and controls.size == plant.spec.N * plant.spec.n_u:
        controls = controls.reshape(plant.spec.N, plant.spec.n_u)
    if controls.shape != (plant.spec.N, plant.spec.n_u):
        raise ContractViolationError(
            f"controls must have shape ({plant.spec.N}, {plant.spec.n_u}), "
            f"got {controls.shape}")
    return controls


def beliefs_to_csv(beliefs: list[GaussianBelief], path, *, header_lines=()) -> None:
    """Write a belief trajectory as CSV: step, mean_0.., trace_cov."""
    n_x = beliefs[0].mean.shape[0]
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["step"] + [f"mean_{i}" for i in range(n_x)] + ["trace_cov"])
        for k, b in enumerate(beliefs):
            writer.writerow([k] + [repr(float(x)) for x in b.mean]
                            + [repr(float(b.trace))])
