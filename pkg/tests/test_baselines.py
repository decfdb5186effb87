import numpy as np
import pytest

from dglmc.baselines import (GaussianLaw, axda_marginal_gaussian, calibrate_dsgld_step,
                             calibrate_mala_step, chain_stationary_gaussian,
                             exact_axda_marginal_gaussian, exact_gaussian_posterior, gaussian_fit,
                             gaussian_w2, mala_log_acceptance, run_dsgld, run_mala)
from dglmc.diagnostics import moments_with_se
from dglmc.engine import ClusterProfile, RunConfig, run_dglmc
from dglmc.kernels import HyperParams, StreamSet
from dglmc.model import NegLogPosterior, gaussian_model, quadratic_potential
from oracles import (CONJUGATE_1D, ar1_stationary, bures_scalar, conjugate_scalar,
                     mala_grid_kernel, mala_log_accept_reference)


def _law(mean, cov):
    return GaussianLaw(np.atleast_1d(np.asarray(mean, float)), np.atleast_2d(cov))


def _random_law(rng, d):
    a = rng.normal(size=(d, d))
    return GaussianLaw(rng.normal(size=d), a @ a.T + 0.1 * np.eye(d))


def _toy(n=1000, b=4, d=2, seed=0):
    y = np.random.default_rng(seed).normal(loc=0.3, size=(n, d))
    return gaussian_model(np.zeros(d), 4 * np.eye(d), np.eye(d), np.array_split(y, b)), y


def test_posterior_without_data_is_prior():
    prior = _law([1.0, -1.0], np.diag([2.0, 3.0]))
    assert exact_gaussian_posterior(prior, np.eye(2), np.zeros((0, 2))) is prior


def test_posterior_hand_example():
    post = exact_gaussian_posterior(_law(0.0, 1.0), [[1.0]], [[2.0]])
    assert post.mean[0] == pytest.approx(CONJUGATE_1D["mean"], rel=1e-15)
    assert post.cov[0, 0] == pytest.approx(CONJUGATE_1D["var"], rel=1e-15)


def test_posterior_diagonal_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    y = rng.normal(size=(50, 3))
    prior_var, noise_var = np.array([1.0, 2.0, 4.0]), np.array([0.5, 1.0, 3.0])
    post = exact_gaussian_posterior(_law([0.1, 0.2, 0.3], np.diag(prior_var)),
                                    np.diag(noise_var), y)
    for j in range(3):
        mean, var = conjugate_scalar(0.1 * (j + 1), prior_var[j], noise_var[j], y[:, j])
        assert post.mean[j] == pytest.approx(mean, rel=1e-12)
        assert post.cov[j, j] == pytest.approx(var, rel=1e-12)


def test_gaussian_law_rejects_non_spd():
    with pytest.raises(ValueError):
        GaussianLaw(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_axda_marginal_closed_form():
    post = _law(0.0, 0.5)
    assert exact_axda_marginal_gaussian(post, 0.0).cov[0, 0] == 0.5
    assert exact_axda_marginal_gaussian(post, 0.1).cov[0, 0] == pytest.approx(0.6, rel=1e-15)
    with pytest.raises(ValueError):
        exact_axda_marginal_gaussian(post, -1.0)


def test_axda_marginal_additive_in_rho():
    post = _random_law(np.random.default_rng(2), 3)
    once = exact_axda_marginal_gaussian(post, 0.3)
    twice = exact_axda_marginal_gaussian(exact_axda_marginal_gaussian(post, 0.1), 0.2)
    np.testing.assert_allclose(once.cov, twice.cov, rtol=1e-14)


def test_axda_marginal_rejects_several_workers():
    specs, _ = _toy(b=2)
    with pytest.raises(ValueError, match="single worker"):
        exact_axda_marginal_gaussian(_law([0.0, 0.0], np.eye(2)), 0.1, specs)


def test_axda_general_matches_single_worker_closed_form():
    rng = np.random.default_rng(3)
    y = rng.normal(size=(40, 2))
    (spec,) = gaussian_model(np.zeros(2), 2 * np.eye(2), np.eye(2), [y])
    post = exact_gaussian_posterior(_law([0.0, 0.0], 2 * np.eye(2)), np.eye(2), y)
    a = axda_marginal_gaussian([spec], 0.05)
    b = exact_axda_marginal_gaussian(post, 0.05, [spec])
    np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12)
    np.testing.assert_allclose(a.cov, b.cov, rtol=1e-12)
    np.testing.assert_allclose(axda_marginal_gaussian([spec], 0.0).cov, post.cov, rtol=1e-12)


def test_chain_stationary_matches_var_oracle():
    h = np.array([3.0, 5.0])
    specs = [quadratic_potential(np.eye(1) * h[0], np.ones(1)),
             quadratic_potential(np.eye(1) * h[1], -np.ones(1))]
    rho = np.array([0.2, 0.1])
    gamma = 0.3 * rho / (1 + rho * h)
    q = np.sum(1 / rho)
    gain = (1 / rho) / q
    drift = np.diag(1 - gamma / rho - gamma * h) + np.outer(gamma / rho, gain)
    noise = np.outer(gamma / rho, gamma / rho) / q + np.diag(2 * gamma)
    shift = gamma * h * np.array([1.0, -1.0])
    z_mean, z_cov = ar1_stationary(drift, shift, noise)
    law = chain_stationary_gaussian(specs, HyperParams(rho, gamma, 1, True))
    assert law.mean[0] == pytest.approx(gain @ z_mean, rel=1e-10, abs=1e-14)
    assert law.cov[0, 0] == pytest.approx(gain @ z_cov @ gain + 1 / q, rel=1e-10)


def test_chain_stationary_tends_to_marginal():
    specs, _ = _toy(b=3)
    rho = np.array([s_rho for s_rho in (0.01, 0.02, 0.005)])
    big = np.array([s.m_upper for s in specs])
    marginal = axda_marginal_gaussian(specs, rho)
    errs = []
    for frac in (1e-2, 1e-3):
        hyper = HyperParams(rho, frac * rho / (1 + rho * big), 1, True)
        errs.append(gaussian_w2(chain_stationary_gaussian(specs, hyper), marginal))
    assert errs[1] < errs[0] / 5


def test_dglmc_tiny_step_matches_marginal():
    (spec,) = gaussian_model([0.0], [[1.0]], [[1.0]], [np.array([[1.0], [-0.5]])])
    rho = 0.5
    gamma = rho / (100 * (rho * spec.m_upper + 1))
    marginal = axda_marginal_gaussian([spec], rho)
    rep = run_dglmc([spec], HyperParams(rho, gamma, 1, True), RunConfig(100_000, 2000, 1, 4))
    mean, _, se = moments_with_se(rep.theta_samples)
    assert abs(mean[0] - marginal.mean[0]) < 3 * se[0]


def test_w2_examples():
    a = _law([0.0, 1.0], [[2.0, 0.3], [0.3, 1.0]])
    assert gaussian_w2(a, a) == pytest.approx(0.0, abs=1e-7)
    assert gaussian_w2(_law(1.0, 4.0), _law(-1.0, 1.0)) == pytest.approx(
        bures_scalar(1.0, 4.0, -1.0, 1.0), rel=1e-14)


def test_w2_symmetric_and_triangle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        a, b, c = (_random_law(rng, 3) for _ in range(3))
        assert gaussian_w2(a, b) == pytest.approx(gaussian_w2(b, a), rel=1e-8)
        assert gaussian_w2(a, c) <= gaussian_w2(a, b) + gaussian_w2(b, c) + 1e-10


def test_dsgld_full_batch_is_plain_ula():
    specs, _ = _toy(n=200, b=1)
    (spec,) = specs
    step, n_local, rounds = 1e-3, 3, 20
    rep = run_dsgld(specs, step, 1.0, n_local, RunConfig(rounds, 0, 1, 9),
                    theta0=np.zeros(2))
    noise = StreamSet(9, 1).workers[0]
    x = np.zeros(2)
    expected = []
    for _ in range(rounds):
        xi = noise.standard_normal((n_local, 2))
        for j in range(n_local):
            x = x - step * spec.grad_u(x) + np.sqrt(2 * step) * xi[j]
        expected.append(x)
    np.testing.assert_array_equal(rep.theta_samples, np.array(expected))


@pytest.mark.parametrize("consensus", ["relay", "average"])
def test_dsgld_minibatch_mean(consensus):
    specs, y = _toy(n=2000, b=4)
    post = exact_gaussian_posterior(_law([0.0, 0.0], 4 * np.eye(2)), np.eye(2), y)
    lam = 1 / np.linalg.eigvalsh(post.cov)[0]
    rep = run_dsgld(specs, 0.1 / lam, 0.1, 1, RunConfig(10_000, 500, 1, 1), consensus)
    mean, _, se = moments_with_se(rep.theta_samples)
    assert np.all(np.abs(mean - post.mean) < 3 * se)


def test_dsgld_wall_model_and_errors():
    specs, _ = _toy(n=400, b=2)
    prof = ClusterProfile(np.array([1.0, 2.0]), 0.5)
    rep = run_dsgld(specs, 1e-4, 0.5, 3, RunConfig(4, 0, 1, 0), profile=prof)
    assert rep.wall_model == pytest.approx(2 * (1.0 + 3 * 0.5) + 2 * (1.0 + 3 * 2.0 * 0.5))
    with pytest.raises(ValueError):
        run_dsgld(specs, 1e-4, 0.0, 1, RunConfig(4))
    with pytest.raises(ValueError):
        run_dsgld(specs, 1e-4, 0.5, 1, RunConfig(4), consensus="vote")


def test_mala_log_acceptance_matches_reference():
    rng = np.random.default_rng(6)

    def pot(x):
        return 0.25 * x ** 4 + 0.5 * x ** 2

    def grad(x):
        return x ** 3 + x

    for x, y in rng.normal(size=(20, 2)):
        ours = mala_log_acceptance(np.array([x]), np.array([y]), pot(x), pot(y),
                                   np.array([grad(x)]), np.array([grad(y)]), 0.3)
        assert ours == pytest.approx(mala_log_accept_reference(x, y, pot, grad, 0.3), abs=1e-12)


def test_mala_grid_detailed_balance():
    grid = np.linspace(-3, 3, 61)

    def pot(x):
        return 0.25 * x ** 4

    def grad(x):
        return x ** 3

    kern = mala_grid_kernel(pot, grad, grid, 0.2, mala_log_acceptance)
    weights = np.exp(-pot(grid))
    flow = weights[:, None] * kern
    np.testing.assert_allclose(flow, flow.T, rtol=1e-10, atol=1e-300)
    assert np.all(kern >= 0)


def test_mala_gaussian_moments():
    specs, y = _toy(n=100, b=1)
    post = exact_gaussian_posterior(_law([0.0, 0.0], 4 * np.eye(2)), np.eye(2), y)
    target = NegLogPosterior(specs)
    rep = run_mala(target, 0.01, RunConfig(20_000, 1000, 1, 3))
    mean, cov, se = moments_with_se(rep.theta_samples)
    assert np.all(np.abs(mean - post.mean) < 3 * se)
    np.testing.assert_allclose(np.diag(cov), np.diag(post.cov), rtol=0.1)


def test_mala_acceptance_behaviour():
    specs, _ = _toy(n=100, b=1)
    target = NegLogPosterior(specs)
    cfg = RunConfig(2000, 0, 1, 0)
    tiny = run_mala(target, 1e-6 / 100, cfg).acceptance_rate
    assert tiny > 0.99
    rates = [run_mala(target, h, cfg).acceptance_rate for h in (0.005, 0.02, 0.08)]
    assert rates[0] > rates[1] > rates[2]


def test_calibrate_mala_step_reaches_target():
    specs, _ = _toy(n=100, b=1)
    step, acc = calibrate_mala_step(NegLogPosterior(specs), n_pilot=500)
    assert acc >= 0.57
    cfg = RunConfig(500, 0, 1, 0)
    assert run_mala(NegLogPosterior(specs), 2 * step, cfg).acceptance_rate < 0.57


def test_calibrate_dsgld_step_picks_from_grid():
    specs, y = _toy(n=400, b=2)
    post = exact_gaussian_posterior(_law([0.0, 0.0], 4 * np.eye(2)), np.eye(2), y)
    # 1e-1 diverges (step times curvature is about 40) and is skipped.
    grid = [1e-1, 2e-3, 1e-3, 5e-4]
    step, w2 = calibrate_dsgld_step(specs, post, 1e9, 0.5, 1, RunConfig(300, 50, 1, 0), grid)
    assert step == 2e-3 and np.isfinite(w2)
    step, _ = calibrate_dsgld_step(specs, post, -1.0, 0.5, 1, RunConfig(300, 50, 1, 0), grid)
    assert step in grid


def test_gaussian_fit_moments():
    x = np.random.default_rng(7).normal(size=(500, 2))
    fit = gaussian_fit(x)
    np.testing.assert_allclose(fit.mean, x.mean(axis=0))
    np.testing.assert_allclose(fit.cov, np.cov(x, rowvar=False))
