"""Reference samplers and closed-form oracles.

Includes the conjugate Gaussian posterior, the exact augmented marginal and
the exact stationary law of the split Gibbs chain for quadratic potentials,
the Gaussian Wasserstein-2 distance, distributed SGLD and MALA.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .engine import ClusterProfile, DivergenceError, RunConfig, RunReport, _diverged
from .kernels import HyperParams, StreamSet, build_precision
from .model import GaussianPotential, NegLogPosterior, find_mode
from .validation import as_vector, check_spd


@dataclass(frozen=True)
class GaussianLaw:
    """Multivariate normal ``N(mean, cov)``."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        cov = check_spd(self.cov, "cov")
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "mean", as_vector(self.mean, "mean", cov.shape[0]))

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


def exact_gaussian_posterior(prior: GaussianLaw, cov_like, observations) -> GaussianLaw:
    """Posterior of ``theta`` under ``y_j ~ N(theta, cov_like)`` and a Gaussian prior."""
    cov_like = check_spd(cov_like, "cov_like")
    y = np.asarray(observations, dtype=float).reshape(-1, prior.dim)
    if y.shape[0] == 0:
        return prior
    p0 = np.linalg.inv(prior.cov)
    p1 = np.linalg.inv(cov_like)
    prec = p0 + y.shape[0] * p1
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (p0 @ prior.mean + p1 @ y.sum(axis=0))
    return GaussianLaw(mean, cov)


def exact_axda_marginal_gaussian(posterior: GaussianLaw, rho: float, specs=None) -> GaussianLaw:
    """Single-worker augmented marginal: covariance inflated by ``rho I``.

    When ``specs`` is given it must describe one worker with ``A = I``.
    """
    if specs is not None:
        if len(specs) != 1 or not specs[0].is_identity:
            raise ValueError("the closed form holds for a single worker with A = I only")
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    return GaussianLaw(posterior.mean, posterior.cov + rho * np.eye(posterior.dim))


def _quadratic_parts(specs):
    if not all(isinstance(s, GaussianPotential) for s in specs):
        raise ValueError("closed forms need quadratic (Gaussian) potentials")
    return [(s.precision, s.linear) for s in specs]


def axda_marginal_gaussian(specs, rho) -> GaussianLaw:
    """Exact augmented marginal for quadratic potentials and any ``A_i``.

    Each worker contributes ``N(A_i theta; c_i, H_i^{-1} + rho_i I)``.
    """
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (len(specs),))
    dim = specs[0].dim_in
    prec = np.zeros((dim, dim))
    lin = np.zeros(dim)
    for (h, l), s, r in zip(_quadratic_parts(specs), specs, rho):
        c = np.linalg.solve(h, l)
        w = np.linalg.inv(np.linalg.inv(h) + r * np.eye(h.shape[0]))
        prec += s.matrix_a.T @ w @ s.matrix_a
        lin += s.matrix_a.T @ w @ c
    cov = np.linalg.inv(prec)
    return GaussianLaw(cov @ lin, 0.5 * (cov + cov.T))


def chain_stationary_gaussian(specs, hyper: HyperParams) -> GaussianLaw:
    """Exact stationary law of ``theta`` under the discretised Gibbs chain.

    For quadratic potentials one global iteration is an affine map of ``z``
    plus Gaussian noise, so the stationary mean solves a linear system and the
    covariance a discrete Lyapunov equation.
    """
    parts = _quadratic_parts(specs)
    dims = [s.dim_out for s in specs]
    p = sum(dims)
    dim = specs[0].dim_in
    factor = build_precision(specs, hyper.rho)
    q_inv = np.linalg.inv(factor.q)
    gain = np.hstack([q_inv @ s.matrix_a.T / r for s, r in zip(specs, hyper.rho)])
    trans = np.zeros((p, p))
    inject = np.zeros((p, dim))
    shift = np.zeros(p)
    noise = np.zeros((p, p))
    off = 0
    for (h, lin), s, r, g, n in zip(parts, specs, hyper.rho, hyper.gamma, hyper.n_local):
        di = s.dim_out
        step = (1.0 - g / r) * np.eye(di) - g * h
        power = np.eye(di)
        acc = np.zeros((di, di))
        cov = np.zeros((di, di))
        for _ in range(int(n)):
            acc += power
            cov += 2.0 * g * power @ power.T
            power = step @ power
        sl = slice(off, off + di)
        trans[sl, sl] = power
        inject[sl] = acc @ ((g / r) * s.matrix_a)
        shift[sl] = acc @ (g * lin)
        noise[sl, sl] = cov
        off += di
    a = trans + inject @ gain
    w = inject @ q_inv @ inject.T + noise
    z_mean = np.linalg.solve(np.eye(p) - a, shift)
    z_cov = solve_discrete_lyapunov(a, w)
    cov = gain @ z_cov @ gain.T + q_inv
    return GaussianLaw(gain @ z_mean, 0.5 * (cov + cov.T))


def effective_rho(law: GaussianLaw, posterior: GaussianLaw) -> float:
    """Average diagonal inflation of ``law`` over ``posterior``."""
    return float(np.mean(np.diag(law.cov - posterior.cov)))


def _sqrtm_psd(mat):
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def gaussian_w2(a: GaussianLaw, b: GaussianLaw) -> float:
    """Wasserstein-2 distance between two Gaussians (Bures formula)."""
    root_b = _sqrtm_psd(b.cov)
    cross = _sqrtm_psd(root_b @ a.cov @ root_b)
    tr = float(np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    diff = a.mean - b.mean
    return float(np.sqrt(max(float(diff @ diff) + tr, 0.0)))


def _dsgld_gradient(specs, priors, s_idx, theta, rng, n_mb, scale_workers):
    spec = specs[s_idx]
    n_s = spec.n_obs
    prior = sum(sp.prior_grad(theta) for sp in priors) if priors else np.zeros_like(theta)
    if n_s == 0:
        return prior
    if n_mb >= n_s:
        if len(specs) == 1:
            return spec.grad_u(theta)
        data = spec.grad_u(theta) - spec.prior_grad(theta)
        return scale_workers * data + prior
    idx = rng.choice(n_s, size=n_mb, replace=False)
    return scale_workers * (n_s / n_mb) * spec.data_grad(theta, idx) + prior


def run_dsgld(specs, step: float, batch_frac: float, n_local: int, config: RunConfig,
              consensus: str = "relay", profile: ClusterProfile | None = None,
              theta0=None) -> RunReport:
    """Distributed stochastic-gradient Langevin dynamics.

    Every worker estimates the full-data gradient from a minibatch of its own
    shard, rescaled by ``b * n_s / n_mb``.

    ``consensus="relay"``: a single chain visits the workers in turn and runs
    ``n_local`` steps on each visit. ``consensus="average"``: all workers run
    ``n_local`` steps from the shared state and the master averages the end
    points; each worker injects noise inflated by ``sqrt(b)`` so the averaged
    update keeps unit temperature.

    Args:
        specs: Worker potentials; all must use ``A_i = I``.
        step: Langevin step size.
        batch_frac: Minibatch size as a fraction of each shard, in ``(0, 1]``.
        n_local: Steps per round.
        config: Rounds, burn-in, thinning and seed.
        consensus: ``"relay"`` or ``"average"``.
        profile: Worker latencies for the wall-clock model.
        theta0: Start; defaults to the posterior mode.
    """
    if not all(s.is_identity for s in specs):
        raise ValueError("distributed SGLD needs A_i = I on every worker")
    if not 0 < batch_frac <= 1:
        raise ValueError("batch_frac must lie in (0, 1]")
    if step <= 0:
        raise ValueError("step must be positive")
    if consensus not in ("relay", "average"):
        raise ValueError(f"unknown consensus rule {consensus!r}")
    b = len(specs)
    dim = specs[0].dim_in
    profile = profile or ClusterProfile.homogeneous(b)
    streams = StreamSet(config.seed, b)
    batch_rng = [streams.extra(i) for i in range(b)]
    priors = [s for s in specs if getattr(s, "has_prior", True)]
    n_mb = [max(1, int(round(batch_frac * s.n_obs))) for s in specs]
    theta = find_mode(specs) if theta0 is None else np.array(theta0, dtype=float)
    samples = np.empty((config.n_kept, dim))
    kept = np.empty(config.n_kept, dtype=np.int64)
    sq = np.sqrt(2.0 * step)
    sq_avg = np.sqrt(2.0 * step * b)
    k = 0
    wall = 0.0
    for t in range(config.total_iters):
        if consensus == "relay":
            s_idx = t % b
            x = theta
            noise = streams.workers[s_idx].standard_normal((n_local, dim))
            for j in range(n_local):
                g = _dsgld_gradient(specs, priors, s_idx, x, batch_rng[s_idx], n_mb[s_idx], b)
                x = x - step * g + sq * noise[j]
            theta = x
            frac = n_mb[s_idx] / max(specs[s_idx].n_obs, 1)
            wall += 2.0 * profile.comm_cost + n_local * profile.tau[s_idx] * frac
        else:
            ends = []
            for i in range(b):
                x = theta
                noise = streams.workers[i].standard_normal((n_local, dim))
                for j in range(n_local):
                    g = _dsgld_gradient(specs, priors, i, x, batch_rng[i], n_mb[i], b)
                    x = x - step * g + sq_avg * noise[j]
                ends.append(x)
            theta = np.mean(ends, axis=0)
            fr = np.array([n_mb[i] / max(specs[i].n_obs, 1) for i in range(b)])
            wall += 2.0 * profile.comm_cost + float(np.max(n_local * profile.tau * fr))
        if _diverged(theta):
            raise DivergenceError(t + 1, "theta")
        if config.is_kept(t):
            samples[k] = theta
            kept[k] = t + 1
            k += 1
    return RunReport(samples, kept, wall, config.total_iters, f"dsgld-{consensus}")


def mala_log_acceptance(x, y, u_x, u_y, g_x, g_y, step: float) -> float:
    """Log Metropolis ratio for a Langevin proposal from ``x`` to ``y``.

    ``u`` is the potential (negative log density) and ``g`` its gradient.
    """
    fwd = y - x + step * g_x
    bwd = x - y + step * g_y
    return float(u_x - u_y - (bwd @ bwd - fwd @ fwd) / (4.0 * step))


def run_mala(target, step: float, config: RunConfig, theta0=None,
             profile: ClusterProfile | None = None) -> RunReport:
    """Metropolis-adjusted Langevin algorithm on ``target``.

    Args:
        target: Object with ``value(theta)`` and ``grad(theta)`` returning the
            potential and its gradient, e.g. :class:`NegLogPosterior`.
        step: Proposal step ``h`` in ``y = x - h grad U(x) + sqrt(2h) xi``.
        config: Iterations, burn-in, thinning and seed.
        theta0: Start; defaults to the mode when ``target`` has ``specs``.
        profile: Worker latencies; one MALA step on the full data is charged
            ``sum_i tau_i``. Without a profile each step costs 1.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if theta0 is None:
        theta0 = find_mode(target.specs) if hasattr(target, "specs") else np.zeros(target.dim)
    x = np.array(theta0, dtype=float)
    dim = x.shape[0]
    streams = StreamSet(config.seed, 0)
    rng = streams.master
    u_x, g_x = target.value(x), target.grad(x)
    samples = np.empty((config.n_kept, dim))
    kept = np.empty(config.n_kept, dtype=np.int64)
    sq = np.sqrt(2.0 * step)
    accepted = 0
    k = 0
    for t in range(config.total_iters):
        xi = rng.standard_normal(dim)
        y = x - step * g_x + sq * xi
        u_y, g_y = target.value(y), target.grad(y)
        log_a = mala_log_acceptance(x, y, u_x, u_y, g_x, g_y, step)
        if np.log(rng.random()) < log_a:
            x, u_x, g_x = y, u_y, g_y
            accepted += 1
        if config.is_kept(t):
            samples[k] = x
            kept[k] = t + 1
            k += 1
    per_step = 1.0 if profile is None else float(np.sum(profile.tau))
    report = RunReport(samples, kept, per_step * config.total_iters, config.total_iters, "mala")
    report.acceptance_rate = accepted / config.total_iters
    return report


def calibrate_mala_step(target, theta0=None, target_accept: float = 0.57, n_pilot: int = 2000,
                        seed: int = 0, max_rounds: int = 60) -> tuple[float, float]:
    """Doubling/halving search for a MALA step with acceptance near ``target_accept``.

    Starts at ``1 / lambda_max(Hessian at theta0)``. Doubles while the pilot
    acceptance exceeds the target, otherwise halves until it does.

    Returns:
        ``(step, acceptance)`` for the largest tried step whose pilot
        acceptance is at least ``target_accept``.
    """
    if theta0 is None:
        theta0 = find_mode(target.specs)
    lam = float(np.linalg.eigvalsh(target.hess(theta0))[-1])
    step = 1.0 / lam
    cfg = RunConfig(n_pilot, 0, 1, seed)

    def acc(h):
        return run_mala(target, h, cfg, theta0).acceptance_rate

    a = acc(step)
    if a >= target_accept:
        for _ in range(max_rounds):
            a2 = acc(2.0 * step)
            if a2 < target_accept:
                break
            step, a = 2.0 * step, a2
        return step, a
    for _ in range(max_rounds):
        step *= 0.5
        a = acc(step)
        if a >= target_accept:
            break
    return step, a


def gaussian_fit(samples) -> GaussianLaw:
    """Gaussian with the sample mean and covariance of ``samples``."""
    x = np.atleast_2d(samples)
    return GaussianLaw(x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False)))


def calibrate_dsgld_step(specs, reference: GaussianLaw, target_w2: float, batch_frac: float,
                         n_local: int, pilot: RunConfig, grid, consensus: str = "relay"):
    """Largest step in ``grid`` whose pilot run is as accurate as ``target_w2``.

    Accuracy is the W2 distance between the Gaussian fit of the pilot samples
    and ``reference``. If no step qualifies, the most accurate one is
    returned. Steps whose pilot diverges are skipped.

    Returns:
        ``(step, pilot_w2)``.
    """
    tried = []
    for h in sorted(grid):
        try:
            rep = run_dsgld(specs, h, batch_frac, n_local, pilot, consensus)
        except DivergenceError:
            continue
        tried.append((h, gaussian_w2(gaussian_fit(rep.theta_samples), reference)))
    if not tried:
        raise DivergenceError(pilot.total_iters, "every pilot step diverged")
    ok = [t for t in tried if t[1] <= target_w2]
    if ok:
        return max(ok)
    return min(tried, key=lambda t: t[1])


__all__ = [
    "GaussianLaw", "exact_gaussian_posterior", "exact_axda_marginal_gaussian",
    "axda_marginal_gaussian", "chain_stationary_gaussian", "effective_rho", "gaussian_w2",
    "run_dsgld", "mala_log_acceptance", "run_mala", "calibrate_mala_step", "gaussian_fit",
    "calibrate_dsgld_step", "NegLogPosterior",
]
