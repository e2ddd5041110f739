import numpy as np
import pytest

from soc_kit.enkf import GaussianBelief
from soc_kit.exceptions import ContractViolationError, UnderdeterminedError
from soc_kit.plant import HeatPlantConfig, HeatSlabPlant, LinearPlant
from soc_kit.trajopt import NominalTrajectory, nominal_rollout
from soc_kit.tvera import (ExperimentArchive, HankelConfig, LtvModel,
                           MarkovParameterSet, build_hankel, era_realize,
                           estimate_markov, reconstruct_markov,
                           run_impulse_experiments)


def random_ltv(n_x, n_u, n_y, N, seed, rho=0.9):
    """Random observable/controllable LTV triples with bounded spectra."""
    rng = np.random.default_rng(seed)
    As, Bs, Cs = [], [], []
    for _ in range(N):
        A = rng.standard_normal((n_x, n_x))
        A *= rho / max(abs(np.linalg.eigvals(A)))
        As.append(A)
        Bs.append(rng.standard_normal((n_x, n_u)))
        Cs.append(rng.standard_normal((n_y, n_x)))
    Cs.append(rng.standard_normal((n_y, n_x)))
    return As, Bs, Cs


def exact_markov(As, Bs, Cs, N, n_y, n_u):
    """Product oracle h_{k,j} = C_k A_{k-1} ... A_{j+1} B_j."""
    blocks = np.zeros((N + 1, N, n_y, n_u))
    for j in range(N):
        acc = Bs[j]
        for k in range(j + 1, N + 1):
            blocks[k, j] = Cs[k] @ acc
            if k < N:
                acc = As[k] @ acc
    return MarkovParameterSet(blocks=blocks)


def make_nominal(plant, controls):
    states, obs = nominal_rollout(plant, plant_initial(plant), controls)
    beliefs = [GaussianBelief(states[0], np.zeros((plant.spec.n_x,) * 2))]
    return NominalTrajectory(controls=controls, beliefs=beliefs,
                             nominal_observations=obs, cost=0.0,
                             mean_states=states)


def plant_initial(plant):
    if isinstance(plant, HeatSlabPlant):
        return plant.initial_state()
    return np.zeros(plant.spec.n_x)


@pytest.fixture
def small_linear_plant():
    rng = np.random.default_rng(11)
    A = rng.standard_normal((4, 4))
    A *= 0.85 / max(abs(np.linalg.eigvals(A)))
    B = rng.standard_normal((4, 2))
    C = rng.standard_normal((2, 4))
    return LinearPlant(A, B, C, N=20)


class TestImpulseExperiments:
    def test_zero_magnitude_gives_zero_deviations(self, small_linear_plant):
        plant = small_linear_plant
        nominal = make_nominal(plant, np.full((20, 2), 0.3))
        archive = run_impulse_experiments(plant, nominal, 0.0)
        assert np.array_equal(archive.delta_y, np.zeros_like(archive.delta_y))
        assert not archive.impulse

    def test_causality_no_anticipation(self, small_linear_plant):
        plant = small_linear_plant
        nominal = make_nominal(plant, np.zeros((20, 2)))
        archive = run_impulse_experiments(plant, nominal, 0.01)
        n_u = 2
        for e in range(archive.n_experiments):
            i = e // n_u
            assert np.array_equal(archive.delta_y[e, :i + 1],
                                  np.zeros((i + 1, 2)))
            if i + 1 <= plant.spec.N:
                assert np.any(archive.delta_y[e, i + 1] != 0.0)

    def test_threaded_matches_serial(self, small_linear_plant):
        plant = small_linear_plant
        nominal = make_nominal(plant, np.full((20, 2), 0.1))
        a1 = run_impulse_experiments(plant, nominal, 0.01, threads=1)
        a4 = run_impulse_experiments(plant, nominal, 0.01, threads=4)
        # BLAS kernels may differ with the batch shape, so equality is up
        # to last-bit rounding for the linear plant
        assert np.allclose(a1.delta_y, a4.delta_y, rtol=0, atol=1e-13)


class TestEstimateMarkov:
    def test_linear_plant_matches_product_oracle(self, small_linear_plant):
        plant = small_linear_plant
        N = plant.spec.N
        nominal = make_nominal(plant, np.full((N, 2), 0.25))
        archive = run_impulse_experiments(plant, nominal, 0.01)
        markov = estimate_markov(archive)
        As = [plant.A] * N
        Bs = [plant.B] * N
        Cs = [plant.C] * (N + 1)
        oracle = exact_markov(As, Bs, Cs, N, 2, 2)
        for k in range(1, N + 1):
            for j in range(k):
                assert np.allclose(markov.block(k, j), oracle.block(k, j),
                                   atol=1e-10)

    def test_adjacent_block_is_cb(self, small_linear_plant):
        plant = small_linear_plant
        nominal = make_nominal(plant, np.zeros((20, 2)))
        markov = estimate_markov(run_impulse_experiments(plant, nominal, 0.01))
        for k in (1, 7, 20):
            assert np.allclose(markov.block(k, k - 1), plant.C @ plant.B,
                               atol=1e-10)

    def test_heat_estimates_match_fd_linearization_oracle(self):
        # nonlinear plant: impulse-estimated blocks vs central-difference
        # linearized triples, 5% relative Frobenius per block
        cfg = HeatPlantConfig(n_grid=30, kappa0=1e-3, source_scaling="nodal")
        plant = HeatSlabPlant(cfg, dt=0.25, N=30, W=np.eye(5), V=np.eye(5))
        controls = np.full((30, 5), 10.0)
        nominal = make_nominal(plant, controls)
        markov = estimate_markov(run_impulse_experiments(plant, nominal, 0.01))

        n_x, n_u = 30, 5
        eps = 1e-4
        As, Bs = [], []
        for k in range(30):
            xk = nominal.mean_states[k]
            A = np.empty((n_x, n_x))
            for i in range(n_x):
                dx = np.zeros(n_x)
                dx[i] = eps
                A[:, i] = (plant.step(xk + dx, controls[k], np.zeros(5))
                           - plant.step(xk - dx, controls[k], np.zeros(5))) / (2 * eps)
            B = np.empty((n_x, n_u))
            for c in range(n_u):
                du = np.zeros(n_u)
                du[c] = eps
                B[:, c] = (plant.step(xk, controls[k] + du, np.zeros(5))
                           - plant.step(xk, controls[k] - du, np.zeros(5))) / (2 * eps)
            As.append(A)
            Bs.append(B)
        C = np.zeros((5, n_x))
        C[np.arange(5), plant.sensor_idx] = 1.0
        oracle = exact_markov(As, Bs, [C] * 31, 30, 5, 5)
        for k in range(1, 31):
            for j in range(k):
                ref = oracle.block(k, j)
                if np.linalg.norm(ref) < 1e-9:
                    continue
                err = np.linalg.norm(markov.block(k, j) - ref) / np.linalg.norm(ref)
                assert err <= 0.05

    def test_general_least_squares_path(self, small_linear_plant):
        # random (non-impulse) excitation recovers the same parameters
        plant = small_linear_plant
        N = plant.spec.N
        nominal = make_nominal(plant, np.zeros((N, 2)))
        rng = np.random.default_rng(3)
        n_exp = N * 2 + 10
        delta_u = 0.01 * rng.standard_normal((n_exp, N, 2))
        delta_y = np.zeros((n_exp, N + 1, 2))
        for e in range(n_exp):
            states, obs = nominal_rollout(plant, np.zeros(4),
                                          nominal.controls + delta_u[e])
            delta_y[e] = obs - nominal.nominal_observations
        archive = ExperimentArchive(delta_u=delta_u, delta_y=delta_y)
        markov = estimate_markov(archive)
        impulse = estimate_markov(run_impulse_experiments(plant, nominal, 0.01))
        for k in (1, 5, 12, 20):
            for j in range(k):
                assert np.allclose(markov.block(k, j), impulse.block(k, j),
                                   atol=1e-7)

    def test_rank_deficient_design_raises_with_blocks(self, small_linear_plant):
        plant = small_linear_plant
        N = plant.spec.N
        # excite only step 0 -> blocks (k, j>0) unidentifiable
        delta_u = np.zeros((4, N, 2))
        delta_u[:2, 0, 0] = 0.01
        delta_u[2:, 0, 1] = 0.01
        delta_y = np.zeros((4, N + 1, 2))
        archive = ExperimentArchive(delta_u=delta_u, delta_y=delta_y)
        with pytest.raises(UnderdeterminedError) as exc:
            estimate_markov(archive)
        assert (2, 1) in exc.value.blocks


class TestHankel:
    def test_single_block(self, small_linear_plant):
        plant = small_linear_plant
        nominal = make_nominal(plant, np.zeros((20, 2)))
        markov = estimate_markov(run_impulse_experiments(plant, nominal, 0.01))
        H = build_hankel(markov, 5, 1, 1)
        assert np.array_equal(H, markov.block(5, 4))

    def test_scalar_lti_powers(self):
        # a=0.5, b=c=1: H_k(r, c) = 0.5^(r+c)
        N = 20
        As = [np.array([[0.5]])] * N
        Bs = [np.array([[1.0]])] * N
        Cs = [np.array([[1.0]])] * (N + 1)
        markov = exact_markov(As, Bs, Cs, N, 1, 1)
        H = build_hankel(markov, 8, 4, 4)
        expected = np.array([[0.5 ** (r + c) for c in range(4)]
                             for r in range(4)])
        assert np.allclose(H, expected, atol=1e-14)

    def test_paper_scale_dimensions(self):
        markov = MarkovParameterSet(blocks=np.zeros((41, 40, 5, 5)))
        H = build_hankel(markov, 15, 15, 15)
        assert H.shape == (75, 75)

    def test_window_bounds(self):
        markov = MarkovParameterSet(blocks=np.zeros((21, 20, 2, 2)))
        with pytest.raises(ContractViolationError):
            build_hankel(markov, 3, 4, 4)  # q > k
        with pytest.raises(ContractViolationError):
            build_hankel(markov, 18, 4, 4)  # k + p - 1 > N

    def test_layout_matches_definition(self):
        rng = np.random.default_rng(0)
        blocks = rng.standard_normal((13, 12, 2, 3))
        markov = MarkovParameterSet(blocks=blocks)
        k, p, q = 5, 3, 4
        H = build_hankel(markov, k, p, q)
        for r in range(p):
            for c in range(q):
                assert np.array_equal(
                    H[2 * r:2 * r + 2, 3 * c:3 * c + 3],
                    blocks[k + r, k - 1 - c])


class TestEraRealize:
    def test_exact_recovery_random_ltv(self):
        n_x, n_u, n_y, N = 6, 2, 2, 30
        As, Bs, Cs = random_ltv(n_x, n_u, n_y, N, seed=1)
        markov = exact_markov(As, Bs, Cs, N, n_y, n_u)
        model = era_realize(markov, 8, 8, HankelConfig(p=8, q=8, rank_tol=1e-10))
        assert model.n_r == n_x
        lo, hi = model.valid_range
        assert (lo, hi) == (8, 22)
        worst = 0.0
        for k in range(lo, hi + 1):
            for j in range(max(lo, k - 8), k):
                ref = markov.block(k, j)
                err = np.linalg.norm(reconstruct_markov(model, k, j) - ref)
                den = np.linalg.norm(ref)
                if den > 1e-12:
                    worst = max(worst, err / den)
        assert worst <= 1e-8

    def test_rank_monotone_in_tolerance(self):
        n_x, n_u, n_y, N = 5, 2, 2, 30
        As, Bs, Cs = random_ltv(n_x, n_u, n_y, N, seed=2)
        markov = exact_markov(As, Bs, Cs, N, n_y, n_u)
        ranks = [era_realize(markov, 8, 8,
                             HankelConfig(p=8, q=8, rank_tol=tol)).n_r
                 for tol in (1e-12, 1e-8, 1e-3, 1e-1)]
        assert all(a >= b for a, b in zip(ranks, ranks[1:]))
        assert ranks[0] == n_x

    def test_fixed_order_override_and_bounds(self):
        n_x, n_u, n_y, N = 4, 2, 2, 24
        As, Bs, Cs = random_ltv(n_x, n_u, n_y, N, seed=3)
        markov = exact_markov(As, Bs, Cs, N, n_y, n_u)
        model = era_realize(markov, 6, 6, HankelConfig(p=6, q=6, n_r_fixed=3))
        assert model.n_r == 3
        with pytest.raises(ContractViolationError):
            era_realize(markov, 6, 6, HankelConfig(p=6, q=6, n_r_fixed=13))

    def test_zero_hankel_raises(self):
        markov = MarkovParameterSet(blocks=np.zeros((21, 20, 2, 2)))
        with pytest.raises(ContractViolationError):
            era_realize(markov, 4, 4, HankelConfig(p=4, q=4))

    def test_causality_of_stored_parameters(self, small_linear_plant):
        plant = small_linear_plant
        nominal = make_nominal(plant, np.zeros((20, 2)))
        markov = estimate_markov(run_impulse_experiments(plant, nominal, 0.01))
        for k in range(markov.N + 1):
            for j in range(k, markov.N):
                assert np.array_equal(markov.blocks[k, j], np.zeros((2, 2)))
        with pytest.raises(ContractViolationError):
            markov.block(5, 5)


class TestReconstruct:
    def test_adjacent_step_is_cb(self):
        n_x, n_u, n_y, N = 4, 2, 2, 24
        As, Bs, Cs = random_ltv(n_x, n_u, n_y, N, seed=4)
        markov = exact_markov(As, Bs, Cs, N, n_y, n_u)
        model = era_realize(markov, 6, 6, HankelConfig(p=6, q=6, rank_tol=1e-10))
        k = 10
        expected = model.C_hat[k] @ model.B_hat[k - 1]
        assert np.array_equal(reconstruct_markov(model, k, k - 1), expected)

    def test_out_of_range_raises_without_clamp(self):
        n_x, n_u, n_y, N = 4, 2, 2, 24
        As, Bs, Cs = random_ltv(n_x, n_u, n_y, N, seed=5)
        markov = exact_markov(As, Bs, Cs, N, n_y, n_u)
        model = era_realize(markov, 6, 6, HankelConfig(p=6, q=6, rank_tol=1e-10))
        with pytest.raises(ContractViolationError):
            reconstruct_markov(model, 24, 23)
        # clamped evaluation substitutes the nearest valid triples
        assert reconstruct_markov(model, 24, 23, clamp=True).shape == (2, 2)
        with pytest.raises(ContractViolationError):
            reconstruct_markov(model, 5, 5)


class TestScaleConsistency:
    def test_linear_plant_magnitude_invariance_exact(self, small_linear_plant):
        # around a resting nominal the response scales exactly by powers of
        # two, so the magnitude cancels to the bit
        plant = small_linear_plant
        nominal = make_nominal(plant, np.zeros((20, 2)))
        m1 = estimate_markov(run_impulse_experiments(plant, nominal, 0.01))
        m2 = estimate_markov(run_impulse_experiments(plant, nominal, 0.02))
        assert np.array_equal(m1.blocks, m2.blocks)

    def test_nonlinear_plant_magnitude_within_linearization_bound(self):
        cfg = HeatPlantConfig(n_grid=24, kappa0=1e-3, source_scaling="nodal")
        plant = HeatSlabPlant(cfg, dt=0.25, N=20, W=np.eye(5), V=np.eye(5))
        nominal = make_nominal(plant, np.full((20, 5), 10.0))
        m1 = estimate_markov(run_impulse_experiments(plant, nominal, 0.01))
        m2 = estimate_markov(run_impulse_experiments(plant, nominal, 0.02))
        for k in (5, 10, 20):
            for j in range(k):
                ref = m1.block(k, j)
                den = np.linalg.norm(ref)
                if den < 1e-9:
                    continue
                assert np.linalg.norm(m2.block(k, j) - ref) / den <= 0.10
