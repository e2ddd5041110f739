import numpy as np
import pytest

from soc_kit.exceptions import ContractViolationError
from soc_kit.plant import (HeatPlantConfig, HeatSlabPlant, LinearPlant,
                           PlantSpec, batched_thomas, nearest_node)


@pytest.fixture
def default_plant():
    return HeatSlabPlant(HeatPlantConfig(), dt=0.25, N=10)


def test_spec_validation_rejects_bad_dims():
    with pytest.raises(ContractViolationError):
        PlantSpec(n_x=0, n_u=1, n_y=1, W=np.eye(1), V=np.eye(1), dt=0.1, N=1)
    with pytest.raises(ContractViolationError):
        PlantSpec(n_x=2, n_u=1, n_y=1, W=np.eye(1), V=np.eye(1), dt=-1.0, N=1)
    with pytest.raises(ContractViolationError):
        PlantSpec(n_x=2, n_u=1, n_y=1, W=np.array([[1.0, 2.0], [0.0, 1.0]])[:1, :1] * -1,
                  V=np.eye(1), dt=0.1, N=1)


def test_uniform_steady_state_without_convection():
    # T=150 satisfies both boundary conditions; eta=0, u=0 -> fixed point
    plant = HeatSlabPlant(HeatPlantConfig(eta=0.0), dt=0.25, N=5)
    T = np.full(100, 150.0)
    T_next = plant.step(T, np.zeros(5), np.zeros(5))
    assert np.allclose(T_next, T, rtol=0, atol=1e-9)


def test_decoupled_source_integration_nodal():
    # diffusion and convection off: the source node integrates dt * u exactly
    cfg = HeatPlantConfig(kappa0=0.0, eta=0.0, source_scaling="nodal")
    plant = HeatSlabPlant(cfg, dt=0.25, N=5)
    T = np.full(100, 120.0)
    c = 3.7
    T_next = plant.step(T, np.array([0.0, c, 0.0, 0.0, 0.0]), np.zeros(5))
    node = plant.source_idx[1]
    assert T_next[node] == pytest.approx(120.0 + 0.25 * c, abs=1e-12)
    others = np.delete(np.arange(100), [node, 99])
    assert np.array_equal(T_next[others], T[others])


def test_density_scaling_divides_by_dx():
    cfg = HeatPlantConfig(kappa0=0.0, eta=0.0, source_scaling="density")
    plant = HeatSlabPlant(cfg, dt=0.25, N=5)
    T = np.full(100, 120.0)
    T_next = plant.step(T, np.array([1.0, 0, 0, 0, 0]), np.zeros(5))
    assert T_next[plant.source_idx[0]] == pytest.approx(
        120.0 + 0.25 / plant.dx, rel=1e-12)


def test_noise_enters_through_control_channel():
    cfg = HeatPlantConfig(kappa0=0.0, eta=0.0, source_scaling="nodal")
    plant = HeatSlabPlant(cfg, dt=0.25, N=5)
    T = np.full(100, 120.0)
    u = np.array([1.0, 2.0, 0.0, 0.0, 0.0])
    w = np.array([0.5, -2.0, 0.0, 0.0, 0.0])
    via_noise = plant.step(T, u, w)
    via_control = plant.step(T, u + w, np.zeros(5))
    assert np.array_equal(via_noise, via_control)


def fine_step_oracle(plant, T0, n_sub=1000):
    """Explicit Euler at dt/n_sub with the same spatial discretization."""
    cfg = plant.config
    dt = plant.spec.dt / n_sub
    T = T0.copy()
    for _ in range(n_sub):
        K = cfg.kappa0 * (1.0 + cfg.kappa1 * T)
        lap = np.empty_like(T)
        lap[1:-1] = T[:-2] - 2 * T[1:-1] + T[2:]
        lap[0] = 2.0 * (T[1] - T[0])
        lap[-1] = 0.0
        T = T + dt * (K * lap / plant.dx ** 2 - cfg.eta * T)
        T[-1] = cfg.T_right
    return T


def test_implicit_step_matches_fine_explicit_oracle(default_plant):
    # Backward Euler is first order in time, and the initial field has a
    # 50-degree jump at the pinned boundary, so the one-step error at
    # dt=0.25 sits at the discretization scale (oracle-measured ~1.4e-3
    # max-relative).  At dt=0.05 the scheme is inside 1e-4 of the oracle.
    T0 = np.full(100, 100.0)
    implicit = default_plant.step(T0, np.zeros(5), np.zeros(5))
    oracle = fine_step_oracle(default_plant, T0)
    rel = np.abs(implicit - oracle).max() / np.abs(oracle).max()
    assert rel <= 2e-3

    fine = HeatSlabPlant(HeatPlantConfig(), dt=0.05, N=5)
    implicit = fine.step(T0, np.zeros(5), np.zeros(5))
    oracle = fine_step_oracle(fine, T0)
    rel = np.abs(implicit - oracle).max() / np.abs(oracle).max()
    assert rel <= 1e-4


def test_substep_refinement_is_monotone():
    T0 = np.full(100, 100.0)
    base = HeatSlabPlant(HeatPlantConfig(), dt=0.25, N=5)
    oracle = fine_step_oracle(base, T0, n_sub=4000)
    errors = []
    for substeps in (1, 2, 4, 8):
        plant = HeatSlabPlant(HeatPlantConfig(substeps=substeps), dt=0.25, N=5)
        T = plant.step(T0, np.zeros(5), np.zeros(5))
        errors.append(np.abs(T - oracle).max())
    assert errors == sorted(errors, reverse=True)
    assert all(e2 < e1 for e1, e2 in zip(errors, errors[1:]))


def test_conservation_with_zero_flux_boundaries():
    # test-only configuration: both boundaries zero-flux, constant K, eta=0.
    # The scheme conserves the trapezoid-weighted discrete mass exactly.
    cfg = HeatPlantConfig(kappa0=1e-3, kappa1=0.0, eta=0.0, right_bc="neumann")
    plant = HeatSlabPlant(cfg, dt=0.25, N=5)
    rng = np.random.default_rng(42)
    T = 100.0 + 30.0 * rng.random(100)
    w = np.ones(100)
    w[0] = w[-1] = 0.5
    T_next = plant.step(T, np.zeros(5), np.zeros(5))
    before, after = w @ T, w @ T_next
    assert abs(after - before) / abs(before) <= 1e-10


def test_purity_bit_identical(default_plant):
    rng = np.random.default_rng(0)
    T = 100.0 + rng.random(100)
    u = rng.random(5)
    w = rng.random(5)
    a = default_plant.step(T, u, w)
    b = default_plant.step(T, u, w)
    assert np.array_equal(a, b)
    ya = default_plant.observe(T, w)
    yb = default_plant.observe(T, w)
    assert np.array_equal(ya, yb)


def test_observe_uniform_and_additive_noise(default_plant):
    T = np.full(100, 100.0)
    assert np.array_equal(default_plant.observe(T, np.zeros(5)),
                          np.full(5, 100.0))
    noisy = default_plant.observe(T, np.array([1.0, 0, 0, 0, 0]))
    assert noisy[0] == pytest.approx(101.0)
    assert np.array_equal(noisy[1:], np.full(4, 100.0))


def test_sensor_nearest_node_index():
    assert nearest_node(0.9, 100) == round(0.9 * 99)
    plant = HeatSlabPlant(HeatPlantConfig(), dt=0.25, N=5)
    T = np.arange(100.0)
    y = plant.observe(T, np.zeros(5))
    assert y[-1] == T[round(0.9 * 99)]


def test_dimension_mismatch_raises(default_plant):
    with pytest.raises(ContractViolationError):
        default_plant.step(np.zeros(99), np.zeros(5), np.zeros(5))
    with pytest.raises(ContractViolationError):
        default_plant.step(np.zeros(100), np.zeros(4), np.zeros(5))
    with pytest.raises(ContractViolationError):
        default_plant.observe(np.zeros(100), np.zeros(4))


def test_config_invariants():
    with pytest.raises(ContractViolationError):
        HeatPlantConfig(n_grid=2)
    with pytest.raises(ContractViolationError):
        HeatPlantConfig(source_positions=(0.0, 0.5))
    with pytest.raises(ContractViolationError):
        HeatPlantConfig(kappa0=-1.0)
    with pytest.raises(ContractViolationError):
        HeatPlantConfig(source_scaling="banana")


def test_batched_thomas_matches_dense_solve():
    rng = np.random.default_rng(3)
    B, n = 7, 12
    sub = rng.random((B, n - 1))
    sup = rng.random((B, n - 1))
    diag = 4.0 + rng.random((B, n))
    rhs = rng.standard_normal((B, n))
    x = batched_thomas(sub.copy(), diag.copy(), sup.copy(), rhs.copy())
    for b in range(B):
        A = np.diag(diag[b]) + np.diag(sub[b], -1) + np.diag(sup[b], 1)
        assert np.allclose(x[b], np.linalg.solve(A, rhs[b]), atol=1e-10)


def test_linear_plant_step_and_observe():
    A = np.array([[0.9, 0.1], [0.0, 0.8]])
    B = np.array([[0.0], [1.0]])
    C = np.array([[1.0, 0.0]])
    plant = LinearPlant(A, B, C, N=3)
    x = np.array([1.0, 2.0])
    u = np.array([0.5])
    w = np.array([0.25])
    assert np.allclose(plant.step(x, u, w), A @ x + B @ (u + w).reshape(-1))
    assert np.allclose(plant.observe(x, np.zeros(1)), C @ x)
