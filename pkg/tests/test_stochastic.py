import numpy as np
import pytest

from cordeslab.fields import Box, builtin_problem, make_field
from cordeslab.grid import GridFunction, build_grid
from cordeslab.solver import BackwardProblem, solve_backward, solve_forward_adjoint
from cordeslab.stochastic import (SDE, HatSampler, PointSampler,
                                  TruncatedGaussianSampler,
                                  characteristic_functional, density_compare,
                                  feynman_kac, max_principle_check,
                                  simulate_paths, verify_pairing)


def free_space(T=0.25, half_width=8.0):
    return builtin_problem("gaussian_free_space",
                           {"n": 1, "half_width": half_width, "T": T})


# ----------------------------------------------------------------------------
# simulation basics


def test_degenerate_diffusion_constant_paths():
    f = make_field(1, 0.5, Box((0.0,), (1.0,)), [[0.0]], beta=[[0.0]])
    ens = simulate_paths(SDE(f), PointSampler([0.4]), 0.05, 50, 3)
    assert np.all(ens.final_y == 0.4)
    assert np.all(ens.tau == 0.5)
    assert not ens.exited.any()


def test_second_moment_matches_gaussian():
    T = 0.25
    ens = simulate_paths(SDE(free_space(T)), PointSampler([0.0]), 1e-3,
                         100_000, 11)
    m2 = float((ens.final_y[:, 0] ** 2).mean())
    se = float((ens.final_y[:, 0] ** 2).std(ddof=1) / np.sqrt(ens.M))
    assert abs(m2 - 2 * T) <= 3 * se


def test_partitioning_determinism():
    # per-path keyed noise: trajectories agree bitwise no matter how the
    # path range is partitioned into worker blocks
    f = free_space(0.1)
    sampler = PointSampler([0.0])
    full = simulate_paths(SDE(f), sampler, 1e-3, 10_000, 99, record="all",
                          block_size=10_000)
    eight = simulate_paths(SDE(f), sampler, 1e-3, 10_000, 99, record="all",
                           block_size=1250)
    assert np.array_equal(full.traj, eight.traj)
    ragged = simulate_paths(SDE(f), sampler, 1e-3, 10_000, 99, record="all",
                            block_size=777)
    assert np.array_equal(full.traj, ragged.traj)
    assert np.array_equal(full.final_y, ragged.final_y)


def test_seed_determinism_of_estimates():
    f = free_space(0.1)
    sampler = TruncatedGaussianSampler([0.0], 1.0, f.sampling_box())
    runs = [feynman_kac(simulate_paths(SDE(f), sampler, 1e-3, 5000, 7,
                                       block_size=bs),
                        Phi=lambda x: x[:, 0] ** 2)
            for bs in (5000, 613)]
    assert runs[0].value == runs[1].value
    assert runs[0].stderr == runs[1].stderr


def test_discount_positivity_real_rate():
    f = make_field(1, 0.3, Box((-4.0,), (4.0,)), [[1.0]],
                   lam="0.5 + 0.4*sin(x1)", beta=[[np.sqrt(2.0)]])
    ens = simulate_paths(SDE(f), PointSampler([0.2]), 2e-3, 2000, 5)
    factors = np.exp(-ens.discount)
    assert np.all(factors > 0.0) and np.all(factors <= 1.0)


def test_exit_monotonicity_nested_boxes():
    T = 0.2
    taus = {}
    for half in (1.0, 0.5):
        f = make_field(1, T, Box((-half,), (half,)), [[1.0]],
                       beta=[[np.sqrt(2.0)]])
        ens = simulate_paths(SDE(f), PointSampler([0.0]), 1e-3, 4000, 21)
        taus[half] = ens.tau
    assert np.all(taus[0.5] <= taus[1.0] + 1e-15)


def test_stderr_scaling_with_m():
    f = free_space(0.1)
    sampler = TruncatedGaussianSampler([0.0], 1.0, f.sampling_box())
    se = {}
    for M in (4000, 16000):
        ens = simulate_paths(SDE(f), sampler, 1e-3, M, 13)
        se[M] = feynman_kac(ens, Phi=lambda x: x[:, 0] ** 2).stderr
    assert abs(se[4000] / se[16000] - 2.0) <= 0.4


def test_simulate_validation():
    f = free_space(0.1)
    with pytest.raises(ValueError):
        simulate_paths(SDE(f), PointSampler([0.0]), dt=-1.0, M=10,
                       master_seed=0)
    with pytest.raises(ValueError):
        simulate_paths(SDE(f), PointSampler([0.0]), dt=1e-3, M=0,
                       master_seed=0)


def test_derived_beta_matches_analytic():
    # drop the stored factor; the solver-side symmetric root must agree
    f = builtin_problem("identity_heat", {"n": 2})
    bare = make_field(2, 1.0, f.domain, [[1.0, 0.0], [0.0, 1.0]])
    g = build_grid(bare.domain, (9, 9), 4, 1.0)
    sde = SDE(bare, grid=g)
    y = np.array([[0.4, 0.6], [0.2, 0.8]])
    got = sde.beta_at(y, 0.0)
    assert np.abs(got - np.sqrt(2.0) * np.eye(2)).max() <= 1e-12


# ----------------------------------------------------------------------------
# path functionals


def test_constant_terminal_functional_exact():
    f = free_space(0.1)
    ens = simulate_paths(SDE(f), PointSampler([0.0]), 1e-3, 1000, 1)
    est = feynman_kac(ens, Phi=lambda x: np.ones(len(x)))
    assert est.value == 1.0
    assert est.stderr == 0.0


def test_gaussian_quadratic_functional():
    T = 0.25
    f = free_space(T)
    sampler = TruncatedGaussianSampler([0.0], 1.0, f.sampling_box())
    ens = simulate_paths(SDE(f), sampler, 1e-3, 100_000, 123)
    est = feynman_kac(ens, Phi=lambda x: x[:, 0] ** 2)
    assert abs(est.value.real - (1 + 2 * T)) <= 3 * est.stderr


def test_killed_survival_against_spectral_series():
    def survival_series(a, T, terms=50):
        k = np.arange(1, 2 * terms, 2)
        return float(np.sum(4 / (k * np.pi) * np.sin(k * np.pi * a)
                            * np.exp(-(k * np.pi) ** 2 * T)))

    T = 0.05
    f = make_field(1, T, Box((0.0,), (1.0,)), [[1.0]], beta=[[np.sqrt(2.0)]])
    ens = simulate_paths(SDE(f), PointSampler([0.5]), 5e-5, 20_000, 77)
    est = feynman_kac(ens, Phi=lambda x: np.ones(len(x)))
    oracle = survival_series(0.5, T)
    assert abs(est.value.real - oracle) <= 3 * est.stderr + 0.01


def test_source_term_integrates_running_cost():
    # phi = 1, Phi = 0, no killing, no exits: the functional is exactly T
    T = 0.2
    f = free_space(T)
    ens = simulate_paths(SDE(f), PointSampler([0.0]), 1e-3, 500, 3,
                         record="all")
    est = feynman_kac(ens, phi=lambda x, t: np.ones(len(x)))
    assert abs(est.value.real - T) <= 1e-12
    with pytest.raises(ValueError):
        feynman_kac(simulate_paths(SDE(f), PointSampler([0.0]), 1e-3, 10, 3),
                    phi=lambda x, t: np.ones(len(x)))


# ----------------------------------------------------------------------------
# pairing and density cross-checks


def test_verify_pairing_zero_data():
    f = free_space(0.1)
    g = build_grid(f.domain, 63, 16, f.T)
    sampler = TruncatedGaussianSampler([0.0], 1.0, f.sampling_box())
    report = verify_pairing(BackwardProblem(f), g, SDE(f), sampler,
                            dt=2e-3, M=2000, master_seed=4)
    assert report["pde"]["re"] == 0.0 and report["mc"]["re"] == 0.0
    assert report["pass"]


def test_verify_pairing_gaussian_quadratic():
    T = 0.25
    f = free_space(T)
    g = build_grid(f.domain, 511, 128, T)
    sampler = TruncatedGaussianSampler([0.0], 1.0, f.sampling_box())
    prob = BackwardProblem(f, Phi=lambda x: x[:, 0] ** 2)
    report = verify_pairing(prob, g, SDE(f), sampler, dt=1e-3, M=50_000,
                            master_seed=12, allowance=2e-2)
    assert report["pass"], report
    assert abs(report["pde"]["re"] - 1.5) <= 2e-2


def test_verify_pairing_benchmark_box():
    # two independent routes act as each other's oracle on the 3-D box
    f = builtin_problem("paper_3x3", {"alpha": 0.5, "beta": 0.0, "T": 0.15})
    g = build_grid(f.domain, (13, 13, 13), 24, f.T)
    sampler = HatSampler([0.0, 0.0, 0.0], 0.6)
    Phi = lambda x: np.prod(np.cos(0.5 * np.pi * x), axis=1)
    prob = BackwardProblem(f, Phi=Phi)
    report = verify_pairing(prob, g, SDE(f), sampler, dt=5e-4, M=40_000,
                            master_seed=31, allowance=3e-2)
    assert report["pass"], report


def test_density_free_space_and_initial_law():
    T = 0.5
    f = builtin_problem("gaussian_free_space",
                        {"n": 1, "half_width": 8.0, "T": T})
    g = build_grid(f.domain, 127, 128, T)
    hat = HatSampler([0.0], 0.25)
    ens = simulate_paths(SDE(f), hat, T / 128, 100_000, 321,
                         record=[0.0, T])
    adj = solve_forward_adjoint(hat.grid_density(g), BackwardProblem(f), g)
    assert density_compare(ens, adj, T) <= 0.05
    # same-law check at t = 0 with a smooth density
    gauss = TruncatedGaussianSampler([0.0], 1.0, f.sampling_box())
    ens0 = simulate_paths(SDE(f), gauss, T / 128, 100_000, 22, record=[0.0])
    assert density_compare(ens0, GridFunction(g, gauss.grid_density(g)),
                           0.0) <= 0.05
    # oracle: both sides near the N(0, 2T) density
    x = g.axis_nodes(0)
    ref = np.exp(-x ** 2 / (4 * T)) / np.sqrt(4 * np.pi * T)
    assert density_compare(ens, GridFunction(g, ref), T) <= 0.05


def test_density_killing_mass_decay():
    c, T = 1.0, 0.5
    f = make_field(1, T, Box((-8.0,), (8.0,)), [[1.0]], lam=c,
                   beta=[[np.sqrt(2.0)]])
    ens = simulate_paths(SDE(f), HatSampler([0.0], 0.1), T / 128, 50_000, 9,
                         record=[T])
    w = np.exp(-ens.disc_traj[:, -1].real)
    mass = float(w[~ens.exited].sum() / ens.M)
    binom_se = np.sqrt(np.exp(-c * T) * (1 - np.exp(-c * T)) / ens.M)
    assert abs(mass - np.exp(-c * T)) <= 3 * binom_se + 1e-3


def test_density_compare_requires_records():
    f = free_space(0.1)
    g = build_grid(f.domain, 31, 8, f.T)
    ens = simulate_paths(SDE(f), PointSampler([0.0]), 1e-2, 100, 5)
    with pytest.raises(ValueError):
        density_compare(ens, GridFunction(g, np.zeros(g.shape)), 0.05)


# ----------------------------------------------------------------------------
# characteristic functional


def test_characteristic_zero_panel_is_exactly_one():
    T = 0.2
    f = free_space(T)
    sampler = TruncatedGaussianSampler([0.0], 1.0, f.sampling_box())
    xi_t = np.array([0.0, T])
    xi_v = np.zeros((2, 1))
    mc = characteristic_functional(xi_t, xi_v, "mc", sde=SDE(f),
                                   sampler=sampler, dt=2e-3, M=500,
                                   master_seed=8)
    assert mc.value == 1.0 + 0.0j and mc.stderr == 0.0
    g = build_grid(f.domain, 63, 16, T)
    pde = characteristic_functional(xi_t, xi_v, "pde", grid=g,
                                    sampler=sampler, field=f)
    assert pde.value == 1.0 + 0.0j


def test_characteristic_modulus_bounded_by_one():
    T = 0.2
    f = free_space(T)
    sampler = TruncatedGaussianSampler([0.3], 1.0, f.sampling_box())
    xi_t = np.linspace(0, T, 5)
    for scale in (0.5, 2.0, 7.0):
        xi_v = scale * np.sin(1 + 3 * xi_t).reshape(-1, 1)
        mc = characteristic_functional(xi_t, xi_v, "mc", sde=SDE(f),
                                       sampler=sampler, dt=2e-3, M=4000,
                                       master_seed=15)
        assert abs(mc.value) <= 1.0 + 1e-12


def test_characteristic_mc_vs_pde_constant_panel():
    T = 0.25
    f = free_space(T)
    sampler = TruncatedGaussianSampler([0.4], 1.0, f.sampling_box())
    g = build_grid(f.domain, 255, 64, T)
    xi_t = np.array([0.0, T])
    xi_v = np.array([[2.0], [2.0]])
    mc = characteristic_functional(xi_t, xi_v, "mc", sde=SDE(f),
                                   sampler=sampler, dt=T / 64, M=100_000,
                                   master_seed=5)
    pde = characteristic_functional(xi_t, xi_v, "pde", grid=g,
                                    sampler=sampler, field=f)
    assert abs(mc.value - pde.value) <= 3 * mc.stderr + 3e-2
    assert abs(mc.value.imag) > 0.05  # a genuinely complex case


def test_weak_uniqueness_proxy_step_halving():
    T = 0.2
    f = free_space(T)
    sampler = TruncatedGaussianSampler([0.2], 1.0, f.sampling_box())
    xi_t = np.linspace(0.0, T, 9)
    panel = [0.5 * np.ones((9, 1)),
             2.0 * np.ones((9, 1)),
             np.linspace(0, 3, 9).reshape(-1, 1),
             3.0 * np.sin(10 * xi_t).reshape(-1, 1),
             np.where(xi_t < T / 2, 2.0, -1.0).reshape(-1, 1)]
    for xi_v in panel:
        ests = [characteristic_functional(xi_t, xi_v, "mc", sde=SDE(f),
                                          sampler=sampler, dt=dt, M=20_000,
                                          master_seed=int(1000 * dt))
                for dt in (4e-3, 2e-3)]
        diff = abs(ests[0].value - ests[1].value)
        tol = 3 * np.hypot(ests[0].stderr, ests[1].stderr) + 0.02
        assert diff <= tol


# ----------------------------------------------------------------------------
# maximum principle


def test_max_principle_zero_data():
    f = builtin_problem("identity_heat", {"n": 1})
    g = build_grid(f.domain, 15, 8, 1.0)
    prob = BackwardProblem(f)
    sol = solve_backward(prob, g)
    mn, verdict = max_principle_check(sol, prob)
    assert mn == 0.0 and verdict == "pass"


def test_max_principle_positive_bump():
    f = make_field(1, 0.5, Box((0.0,), (1.0,)), [[1.0]], lam=1.0,
                   beta=[[np.sqrt(2.0)]])
    g = build_grid(f.domain, 31, 64, 0.5)
    prob = BackwardProblem(f, Phi=lambda x: np.sin(np.pi * x[:, 0]) ** 2)
    sol = solve_backward(prob, g, theta=1.0)
    mn, verdict = max_principle_check(sol, prob)
    assert verdict == "pass" and mn >= -1e-10


def test_max_principle_not_applicable_on_signed_data():
    f = builtin_problem("identity_heat", {"n": 1})
    g = build_grid(f.domain, 15, 8, 1.0)
    prob = BackwardProblem(f, Phi=lambda x: x[:, 0] - 0.5)
    sol = solve_backward(prob, g)
    _, verdict = max_principle_check(sol, prob)
    assert verdict == "not applicable"


def test_max_principle_random_nonnegative_problems():
    rng = np.random.default_rng(44)
    for trial in range(4):
        n = 1 + trial % 2
        diag = [[f"{rng.uniform(0.8, 1.6):.3f} + "
                 f"{rng.uniform(0.1, 0.3):.3f}*step(x1 - 0.5)"
                 if i == j else 0.0 for j in range(n)] for i in range(n)]
        f = make_field(n, 0.3, Box((0.0,) * n, (1.0,) * n), diag,
                       f=[f"{rng.uniform(-0.3, 0.3):.3f}"] * n,
                       lam=float(rng.uniform(0.0, 1.5)))
        g = build_grid(f.domain, (17,) * n, 24, f.T)
        prob = BackwardProblem(
            f, phi=lambda x, t: np.prod(np.sin(np.pi * x) ** 2, axis=1),
            Phi=lambda x: np.prod(np.sin(np.pi * x) ** 2, axis=1))
        sol = solve_backward(prob, g, theta=1.0)
        mn, verdict = max_principle_check(sol, prob)
        assert verdict == "pass", (trial, mn)
