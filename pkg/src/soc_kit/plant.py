"""Black-box plant contract and built-in simulators.

A plant is an immutable object exposing ``step`` / ``observe`` (and their
batched counterparts) as pure functions: all randomness is injected by the
caller through explicit noise arguments, and process noise enters through
the control channel, so ``step(x, u, w)`` integrates the dynamics with the
effective input ``u + w``.

Two simulators are provided: a nonlinear 1-D heat slab (semi-implicit
finite differences) and a generic discrete linear system used mainly for
validation problems.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is an optional speedup
    njit = None

from .exceptions import ContractViolationError, DivergenceError

_SYM_TOL = 1e-8
_PSD_TOL = 1e-10


def check_psd(mat: np.ndarray, name: str) -> np.ndarray:
    """Validate symmetry and (numerical) positive semi-definiteness."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ContractViolationError(f"{name} must be square, got shape {mat.shape}")
    scale = max(1.0, float(np.abs(mat).max()))
    if np.abs(mat - mat.T).max() > _SYM_TOL * scale:
        raise ContractViolationError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(0.5 * (mat + mat.T)).min() < -_PSD_TOL * scale:
        raise ContractViolationError(f"{name} must be positive semi-definite")
    return mat


@dataclass(frozen=True)
class PlantSpec:
    """Dimensions, noise covariances and time grid of a plant.

    ``W`` is the process-noise covariance on the input channel (n_u x n_u),
    ``V`` the measurement-noise covariance (n_y x n_y).
    """

    n_x: int
    n_u: int
    n_y: int
    W: np.ndarray
    V: np.ndarray
    dt: float
    N: int

    def __post_init__(self):
        if self.n_x < 1:
            raise ContractViolationError("n_x must be >= 1")
        if self.n_u < 1 or self.n_y < 1:
            raise ContractViolationError("n_u and n_y must be >= 1")
        if not self.dt > 0:
            raise ContractViolationError("dt must be > 0")
        if self.N < 1:
            raise ContractViolationError("N must be >= 1")
        object.__setattr__(self, "W", check_psd(self.W, "W"))
        object.__setattr__(self, "V", check_psd(self.V, "V"))
        if self.W.shape != (self.n_u, self.n_u):
            raise ContractViolationError("W must be n_u x n_u")
        if self.V.shape != (self.n_y, self.n_y):
            raise ContractViolationError("V must be n_y x n_y")


class Plant:
    """Base class wiring the single-sample API to the batched one."""

    spec: PlantSpec

    # -- batched API (subclasses implement these) -------------------------
    def step_many(self, states: np.ndarray, controls: np.ndarray,
                  noises: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def observe_many(self, states: np.ndarray, noises: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # -- scalar API --------------------------------------------------------
    def step(self, state: np.ndarray, control: np.ndarray,
             process_noise: np.ndarray) -> np.ndarray:
        state = self._check_vec(state, self.spec.n_x, "state")
        control = self._check_vec(control, self.spec.n_u, "control")
        process_noise = self._check_vec(process_noise, self.spec.n_u, "process_noise")
        return self.step_many(state[None, :], control[None, :], process_noise[None, :])[0]

    def observe(self, state: np.ndarray, measurement_noise: np.ndarray) -> np.ndarray:
        state = self._check_vec(state, self.spec.n_x, "state")
        measurement_noise = self._check_vec(measurement_noise, self.spec.n_y,
                                            "measurement_noise")
        return self.observe_many(state[None, :], measurement_noise[None, :])[0]

    @staticmethod
    def _check_vec(v: np.ndarray, n: int, name: str) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (n,):
            raise ContractViolationError(f"{name} must have shape ({n},), got {v.shape}")
        return v

    @staticmethod
    def _check_finite(out: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(out)):
            raise DivergenceError("plant state became non-finite")
        return out


def batched_thomas(sub: np.ndarray, diag: np.ndarray, sup: np.ndarray,
                   rhs: np.ndarray) -> np.ndarray:
    """Solve a batch of tridiagonal systems by the Thomas algorithm.

    Shapes: sub/sup (B, n-1), diag/rhs (B, n).  No pivoting; intended for
    the diagonally dominant systems produced by implicit diffusion steps.
    """
    n = diag.shape[-1]
    gamma = np.empty_like(sub)
    y = np.empty_like(rhs)
    beta = diag[:, 0].copy()
    y[:, 0] = rhs[:, 0] / beta
    for i in range(1, n):
        gamma[:, i - 1] = sup[:, i - 1] / beta
        beta = diag[:, i] - sub[:, i - 1] * gamma[:, i - 1]
        y[:, i] = (rhs[:, i] - sub[:, i - 1] * y[:, i - 1]) / beta
    x = y
    for i in range(n - 2, -1, -1):
        x[:, i] -= gamma[:, i] * x[:, i + 1]
    return x


def _heat_step_batch(T_in, u_eff, src_idx, src_gain, substeps, dt_sub, eta,
                     kappa0, kappa1, inv_dx2, t_right, dirichlet, out):
    """Fused assembly + Thomas solve for a batch of heat-slab steps."""
    B, n = T_in.shape
    n_src = src_idx.shape[0]
    gam = np.empty(n)
    y = np.empty(n)
    coef = dt_sub * inv_dx2 * kappa0
    damp = 1.0 + dt_sub * eta
    for b in range(B):
        T = T_in[b].copy()
        for _ in range(substeps):
            # rhs = T + dt * sources (sources only touch a few nodes)
            rhs = T.copy()
            for s in range(n_src):
                rhs[src_idx[s]] += dt_sub * src_gain * u_eff[b, s]
            r0 = coef * (1.0 + kappa1 * T[0])
            inv_beta = 1.0 / (damp + 2.0 * r0)
            gam[0] = -2.0 * r0 * inv_beta
            y[0] = rhs[0] * inv_beta
            for i in range(1, n - 1):
                ri = coef * (1.0 + kappa1 * T[i])
                inv_beta = 1.0 / (damp + 2.0 * ri + ri * gam[i - 1])
                gam[i] = -ri * inv_beta
                y[i] = (rhs[i] + ri * y[i - 1]) * inv_beta
            if dirichlet:
                y[n - 1] = t_right
            else:
                rn = coef * (1.0 + kappa1 * T[n - 1])
                inv_beta = 1.0 / (damp + 2.0 * rn + 2.0 * rn * gam[n - 2])
                y[n - 1] = (rhs[n - 1] + 2.0 * rn * y[n - 2]) * inv_beta
            T[n - 1] = y[n - 1]
            for i in range(n - 2, -1, -1):
                T[i] = y[i] - gam[i] * T[i + 1]
        out[b] = T
    return out


if njit is not None:
    _heat_step_batch_jit = njit(cache=True)(_heat_step_batch)
else:  # pragma: no cover
    _heat_step_batch_jit = _heat_step_batch


@dataclass(frozen=True)
class HeatPlantConfig:
    """Nonlinear heat-slab parameters.

    Temperature evolves by ``T_t = K(x,T) T_xx - eta*T + sources`` on a
    uniform grid over [0, L], zero-flux at x=0 and a fixed temperature at
    x=L (a zero-flux right boundary is available for conservation tests).
    The diffusivity law is ``K(x,T) = kappa0 * (1 + kappa1 * T)``.

    ``source_scaling`` selects how a point source of strength u enters the
    discrete equation at its node: "density" adds u/dx (grid-independent
    forcing), "nodal" adds u directly.
    """

    L: float = 0.6
    n_grid: int = 100
    kappa0: float = 1e-5
    kappa1: float = 1e-3
    eta: float = 0.005
    source_positions: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    sensor_positions: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)
    T_init: float = 100.0
    T_right: float = 150.0
    source_scaling: str = "density"
    right_bc: str = "dirichlet"
    substeps: int = 1

    def __post_init__(self):
        if self.n_grid < 3:
            raise ContractViolationError("n_grid must be >= 3")
        for pos in tuple(self.source_positions) + tuple(self.sensor_positions):
            if not 0.0 < pos < 1.0:
                raise ContractViolationError(
                    f"source/sensor fractions must lie in (0, 1), got {pos}")
        if self.kappa0 < 0:
            raise ContractViolationError("kappa0 must be >= 0")
        if self.kappa0 > 0:
            t_hi = 2.0 * max(abs(self.T_init), abs(self.T_right), 150.0)
            if 1.0 + self.kappa1 * t_hi <= 0 or 1.0 - self.kappa1 * t_hi <= 0:
                raise ContractViolationError(
                    "K(x,T) must stay positive over the operating range")
        if self.source_scaling not in ("density", "nodal"):
            raise ContractViolationError("source_scaling must be 'density' or 'nodal'")
        if self.right_bc not in ("dirichlet", "neumann"):
            raise ContractViolationError("right_bc must be 'dirichlet' or 'neumann'")
        if self.substeps < 1:
            raise ContractViolationError("substeps must be >= 1")


def nearest_node(frac: float, n_grid: int) -> int:
    """Grid index of the node nearest a fractional position of the slab."""
    return int(np.rint(frac * (n_grid - 1)))


class HeatSlabPlant(Plant):
    """Semi-implicit finite-difference heat slab.

    Each step solves ``(I - dt K(T) D2 + dt eta I) T' = T + dt S(u+w)``
    with the diffusivity lagged at the pre-step temperature, one
    tridiagonal solve per (sub)step.  Explicit Euler is unstable at the
    desk-scale dt for realistic diffusivities, hence the implicit form.
    """

    def __init__(self, config: HeatPlantConfig | None = None, *, dt: float = 0.25,
                 N: int = 250, W: np.ndarray | None = None,
                 V: np.ndarray | None = None):
        self.config = config or HeatPlantConfig()
        cfg = self.config
        n_u = len(cfg.source_positions)
        n_y = len(cfg.sensor_positions)
        if W is None:
            W = np.eye(n_u)
        if V is None:
            V = np.eye(n_y)
        self.spec = PlantSpec(n_x=cfg.n_grid, n_u=n_u, n_y=n_y,
                              W=W, V=V, dt=dt, N=N)
        self.dx = cfg.L / (cfg.n_grid - 1)
        self.source_idx = np.array([nearest_node(p, cfg.n_grid)
                                    for p in cfg.source_positions])
        self.sensor_idx = np.array([nearest_node(p, cfg.n_grid)
                                    for p in cfg.sensor_positions])
        self._src_gain = (1.0 / self.dx) if cfg.source_scaling == "density" else 1.0

    def initial_state(self) -> np.ndarray:
        return np.full(self.spec.n_x, self.config.T_init)

    def step_many(self, states, controls, noises):
        cfg = self.config
        T = np.ascontiguousarray(states, dtype=float)
        if T.ndim != 2 or T.shape[1] != self.spec.n_x:
            raise ContractViolationError(
                f"states must be (B, {self.spec.n_x}), got {T.shape}")
        u_eff = np.ascontiguousarray(
            np.asarray(controls, dtype=float) + np.asarray(noises, dtype=float))
        out = np.empty_like(T)
        _heat_step_batch_jit(
            T, u_eff, self.source_idx, self._src_gain, cfg.substeps,
            self.spec.dt / cfg.substeps, cfg.eta, cfg.kappa0, cfg.kappa1,
            1.0 / self.dx ** 2, cfg.T_right, cfg.right_bc == "dirichlet", out)
        return self._check_finite(out)

    def observe_many(self, states, noises):
        states = np.asarray(states, dtype=float)
        return states[:, self.sensor_idx] + np.asarray(noises, dtype=float)


class LinearPlant(Plant):
    """Discrete linear system x' = A x + B (u + w), y = C x + v."""

    def __init__(self, A, B, C, *, W=None, V=None, dt: float = 1.0, N: int = 1):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        n_x = self.A.shape[0]
        if self.A.shape != (n_x, n_x):
            raise ContractViolationError("A must be square")
        if self.B.shape[0] != n_x:
            self.B = self.B.reshape(n_x, -1)
        if self.C.shape[1] != n_x:
            self.C = self.C.reshape(-1, n_x)
        n_u = self.B.shape[1]
        n_y = self.C.shape[0]
        if W is None:
            W = np.zeros((n_u, n_u))
        if V is None:
            V = np.zeros((n_y, n_y))
        self.spec = PlantSpec(n_x=n_x, n_u=n_u, n_y=n_y,
                              W=np.atleast_2d(np.asarray(W, dtype=float)),
                              V=np.atleast_2d(np.asarray(V, dtype=float)),
                              dt=dt, N=N)

    def step_many(self, states, controls, noises):
        states = np.asarray(states, dtype=float)
        u_eff = np.asarray(controls, dtype=float) + np.asarray(noises, dtype=float)
        return self._check_finite(states @ self.A.T + u_eff @ self.B.T)

    def observe_many(self, states, noises):
        states = np.asarray(states, dtype=float)
        return states @ self.C.T + np.asarray(noises, dtype=float)
