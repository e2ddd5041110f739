"""Time-varying LQG synthesis on the identified reduced-order model.

Feedback gains come from a backward Riccati recursion on the ROM triples;
the ROM-state estimator is a forward Kalman filter whose process noise is
inherited from the plant through the input channel (B W B').  Steps outside
the realization window use the nearest valid triple.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolationError, SynthesisError
from .plant import check_psd
from .tvera import LtvModel


@dataclass
class LqrWeights:
    """Per-step ROM-state and control weights: Q (N, n_r, n_r), R (N, n_u,
    n_u), terminal Q_N (n_r, n_r)."""

    Q: np.ndarray
    R: np.ndarray
    Q_N: np.ndarray

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.Q_N = check_psd(np.atleast_2d(np.asarray(self.Q_N, float)), "Q_N")
        if self.Q.ndim != 3 or self.R.ndim != 3:
            raise ContractViolationError("Q and R must be stacked per step (3-D)")
        if self.Q.shape[0] != self.R.shape[0]:
            raise ContractViolationError("Q and R must cover the same horizon")

    @property
    def horizon(self) -> int:
        return self.Q.shape[0]


def output_weights(model: LtvModel, horizon: int, Q_y: np.ndarray,
                   R: np.ndarray, Q_y_term: np.ndarray | None = None,
                   eps: float = 1e-8) -> LqrWeights:
    """Build ROM-state weights from output-space weights.

    Q_k = C_k' Q_y C_k + eps*I is the basis-invariant way to penalize
    deviations the sensors can see; eps keeps Q_k positive definite.
    """
    Q_y = check_psd(np.atleast_2d(np.asarray(Q_y, float)), "Q_y")
    R = np.atleast_2d(np.asarray(R, float))
    if Q_y_term is None:
        Q_y_term = Q_y
    Q_y_term = check_psd(np.atleast_2d(np.asarray(Q_y_term, float)), "Q_y_term")
    n_r = model.n_r
    eye = eps * np.eye(n_r)
    Q = np.empty((horizon, n_r, n_r))
    for k in range(horizon):
        _, _, C = model.triple(k, clamp=True)
        Q[k] = C.T @ Q_y @ C + eye
    _, _, C_N = model.triple(horizon, clamp=True)
    Q_N = C_N.T @ Q_y_term @ C_N + eye
    R_stack = np.repeat(R[None, :, :], horizon, axis=0)
    return LqrWeights(Q=Q, R=R_stack, Q_N=Q_N)


@dataclass
class LqgController:
    """Synthesized gains and estimator data over the horizon.

    ``L[k]`` is the feedback gain applied at step k; ``K[k]`` the Kalman
    gain for the measurement at step k (built from the predicted covariance
    ``P[k]``); ``S[k]`` the Riccati value matrices with S[N] = Q_N.
    """

    L: np.ndarray        # (N, n_u, n_r)
    S: np.ndarray        # (N+1, n_r, n_r)
    K: np.ndarray        # (N+1, n_r, n_y)
    P: np.ndarray        # (N+1, n_r, n_r)
    P0: np.ndarray
    a_hat0: np.ndarray

    @property
    def horizon(self) -> int:
        return self.L.shape[0]


def riccati_gains(model: LtvModel, weights: LqrWeights):
    """Backward Riccati recursion: returns (L (N,n_u,n_r), S (N+1,n_r,n_r)).

    S_N = Q_N; L_k = (B'S_{k+1}B + R_k)^-1 B'S_{k+1}A and
    S_k = A'S_{k+1}A + Q_k - A'S_{k+1}B L_k, symmetrized every step.
    """
    N = weights.horizon
    n_r = model.n_r
    _, B0, _ = model.triple(0, clamp=True)
    n_u = B0.shape[1]
    L = np.empty((N, n_u, n_r))
    S = np.empty((N + 1, n_r, n_r))
    S[N] = weights.Q_N
    for k in range(N - 1, -1, -1):
        A, B, _ = model.triple(k, clamp=True)
        BtS = B.T @ S[k + 1]
        M = BtS @ B + weights.R[k]
        try:
            L[k] = np.linalg.solve(M, BtS @ A)
        except np.linalg.LinAlgError as err:
            raise SynthesisError(
                f"B'S B + R is singular at step {k}") from err
        Sk = A.T @ S[k + 1] @ A + weights.Q[k] - A.T @ S[k + 1] @ B @ L[k]
        S[k] = 0.5 * (Sk + Sk.T)
    return L, S


def kalman_predict_update(model: LtvModel, k: int, a_hat: np.ndarray,
                          P: np.ndarray, du: np.ndarray, dy: np.ndarray,
                          W: np.ndarray, V: np.ndarray, *, reg: float = 1e-8,
                          clamp: bool = True):
    """One predict-then-correct Kalman step on the ROM.

    ``a_hat`` is the posterior deviation estimate at step k, ``P`` the
    predicted estimate covariance at step k, ``dy`` the measurement
    deviation observed at step k+1.  Returns (a_hat at k+1, predicted
    covariance at k+1, gain used at k+1).  Expanding the recursion
    reproduces the covariance propagation P+ = A(P - PC'(CPC'+V)^-1 CP)A'
    + BWB' with gain K = PC'(CPC'+V)^-1.
    """
    A, B, C = model.triple(k, clamp=clamp)
    _, _, C_next = model.triple(k + 1, clamp=clamp)
    W = np.atleast_2d(np.asarray(W, float))
    V = np.atleast_2d(np.asarray(V, float))
    P = np.atleast_2d(np.asarray(P, float))
    a_hat = np.asarray(a_hat, float).reshape(-1)
    du = np.asarray(du, float).reshape(-1)
    dy = np.asarray(dy, float).reshape(-1)

    P_corr = P - _gain(P, C, V, reg) @ C @ P
    P_next = A @ P_corr @ A.T + B @ W @ B.T
    P_next = 0.5 * (P_next + P_next.T)
    K_next = _gain(P_next, C_next, V, reg)
    pred = A @ a_hat + B @ du
    a_next = pred + K_next @ (dy - C_next @ pred)
    return a_next, P_next, K_next


def _gain(P: np.ndarray, C: np.ndarray, V: np.ndarray, reg: float) -> np.ndarray:
    """K = P C' (C P C' + V)^-1 with delta*I regularization when singular."""
    innov = C @ P @ C.T + V
    try:
        return np.linalg.solve(innov.T, C @ P.T).T
    except np.linalg.LinAlgError:
        return np.linalg.solve((innov + reg * np.eye(innov.shape[0])).T,
                               C @ P.T).T


def synthesize_lqg(model: LtvModel, horizon: int, W: np.ndarray,
                   V: np.ndarray, Q_y: np.ndarray, R: np.ndarray,
                   Q_y_term: np.ndarray | None = None, *,
                   p0_scale: float = 1.0, eps: float = 1e-8,
                   v_filter: np.ndarray | None = None) -> LqgController:
    """Full LQG synthesis: Riccati gains plus precomputed Kalman gains.

    ``v_filter`` overrides the measurement covariance used by the observer
    (defaults to the plant's V).
    """
    weights = output_weights(model, horizon, Q_y, R, Q_y_term, eps=eps)
    L, S = riccati_gains(model, weights)
    n_r = model.n_r
    V_f = np.atleast_2d(np.asarray(V if v_filter is None else v_filter, float))
    W = np.atleast_2d(np.asarray(W, float))
    n_y = V_f.shape[0]
    P = np.empty((horizon + 1, n_r, n_r))
    K = np.empty((horizon + 1, n_r, n_y))
    P[0] = p0_scale * np.eye(n_r)
    _, _, C0 = model.triple(0, clamp=True)
    K[0] = _gain(P[0], C0, V_f, 1e-8)
    a0 = np.zeros(n_r)
    for k in range(horizon):
        _, P[k + 1], K[k + 1] = kalman_predict_update(
            model, k, a0, P[k], np.zeros(W.shape[0]), np.zeros(n_y), W, V_f)
    return LqgController(L=L, S=S, K=K, P=P, P0=P[0].copy(), a_hat0=a0)
