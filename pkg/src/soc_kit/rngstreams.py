"""Counter-style random streams keyed by (seed, purpose, step).

Every noise draw in the toolkit comes from a fresh generator keyed by the
run seed, a purpose tag, and a step index.  Draws therefore depend only on
the key, never on simulation history, which is what makes common random
numbers work: perturbing a control at step i leaves the noise at every
other step bit-identical.
"""

from __future__ import annotations

import numpy as np

# Purpose tags.  Keep values stable: they are part of the reproducibility
# contract (a seed + config must replay byte-identically).
INIT_ENSEMBLE = 0
PROCESS = 1
MEASUREMENT = 2
INITIAL_STATE = 3

_MASK = (1 << 63) - 1


def stream(seed: int, purpose: int, step: int = 0) -> np.random.Generator:
    """Return the generator for one (seed, purpose, step) cell."""
    key = (int(seed) & _MASK, int(purpose), int(step))
    return np.random.default_rng(np.random.SeedSequence(key))


def covariance_factor(cov: np.ndarray) -> np.ndarray:
    """Factor F with F F' = cov, for sampling N(0, cov) as F @ z.

    Uses Cholesky when possible, otherwise an eigendecomposition with
    negative eigenvalues clipped to zero (PSD matrices with zero modes,
    including cov = 0, are legal noise covariances).
    """
    cov = np.asarray(cov, dtype=float)
    if not np.any(cov):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, u = np.linalg.eigh(0.5 * (cov + cov.T))
        return u * np.sqrt(np.clip(w, 0.0, None))
