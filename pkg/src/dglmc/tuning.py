"""Hyperparameter guidelines and computable convergence/bias bounds.

All calculators are pure functions of the worker potentials and the
hyperparameters and are invariant under a permutation of the workers.
Bounds that do not apply in a given regime come back flagged with a reason
rather than raising.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .engine import ClusterProfile, allocate_local_iters
from .kernels import HyperParams, build_precision, step_violations
from .model import find_mode, gram_sum, model_constants, worker_minimizers

__all__ = [
    "guideline_hyperparams", "guideline_n_avg", "kappa_gamma", "check_contraction",
    "ContractionReport", "axda_bias_bound", "BiasBound", "mixing_budget", "MixingBudget",
    "BoundReport", "bound_report", "mode_offsets", "mean_map_norm", "validate",
]


def _constants(specs):
    m = np.array([s.m_lower for s in specs])
    big_m = np.array([s.m_upper for s in specs])
    dims = np.array([s.dim_out for s in specs])
    return m, big_m, dims


def guideline_n_avg(specs, rho, gamma) -> int:
    """``ceil(mean_i rho_i / (gamma_i (rho_i M_i + 1)))``."""
    _, big_m, _ = _constants(specs)
    ratio = np.mean(rho / (gamma * (rho * big_m + 1.0)))
    # Absorb roundoff so that an exact integer ratio is not bumped up.
    return int(math.ceil(ratio * (1.0 - 1e-12)))


def validate(specs, hyper: HyperParams) -> HyperParams:
    """Mark ``hyper`` validated iff every step obeys ``gamma_i <= rho_i/(1+rho_i M_i)``."""
    return hyper.with_validated(not step_violations(specs, hyper))


def guideline_hyperparams(specs, c_gamma: float = 0.25, profile: ClusterProfile | None = None,
                          n_avg: float | None = None) -> HyperParams:
    """Default tuning: ``rho_i = 1/(5 M_i)``, ``gamma_i = c rho_i/(rho_i M_i + 1)``.

    Args:
        specs: Worker potentials.
        c_gamma: Step fraction in ``[0.1, 0.5]``, scalar or per worker.
        profile: Worker latencies used to split local iterations.
        n_avg: Average local iteration count; defaults to the guideline
            value ``ceil(mean_i rho_i / (gamma_i (rho_i M_i + 1)))``.

    Returns:
        Hyperparameters, marked validated when the step constraint holds.
    """
    b = len(specs)
    c = np.broadcast_to(np.asarray(c_gamma, dtype=float), (b,))
    if np.any(c < 0.1) or np.any(c > 0.5):
        raise ValueError("c_gamma must lie in [0.1, 0.5]")
    _, big_m, _ = _constants(specs)
    rho = 1.0 / (5.0 * big_m)
    gamma = c * rho / (rho * big_m + 1.0)
    if n_avg is None:
        n_avg = guideline_n_avg(specs, rho, gamma)
    profile = profile or ClusterProfile.homogeneous(b)
    n_local = allocate_local_iters(profile, n_avg)
    return validate(specs, HyperParams(rho, gamma, n_local))


def kappa_gamma(specs, hyper: HyperParams) -> float:
    """``max_i max(|1 - gamma_i m_i|, |1 - gamma_i (M_i + 1/rho_i)|)``."""
    m, big_m, _ = _constants(specs)
    g, r = hyper.gamma, hyper.rho
    return float(np.max(np.maximum(np.abs(1.0 - g * m), np.abs(1.0 - g * (big_m + 1.0 / r)))))


@dataclass(frozen=True)
class ContractionReport:
    """Outcome of the contraction check for given hyperparameters."""

    kappa_gamma: float
    r_term: float
    a0: float
    a1: float
    c: float
    step_ratio: float
    rate: float
    s46_ok: bool
    contraction_ok: bool


def check_contraction(specs, hyper: HyperParams, c: float | None = None) -> ContractionReport:
    """Evaluate the remainder ``r`` and the contraction condition.

    ``r`` is the second-order remainder that the multi-step analysis adds to
    ``1 - min_i N_i gamma_i m_i``. With a single local step on every worker
    the one-step matrix is used directly and ``r = 0``.

    ``contraction_ok`` means ``N_i gamma_i <= 2/(m_i + M_i + 1/rho_i)`` for all
    ``i`` and ``1 - min N gamma m + r < 1 - min N gamma m / 2``. ``s46_ok``
    reports the closed-form sufficient condition on ``max N_i gamma_i``.
    """
    m, big_m, _ = _constants(specs)
    rho, gamma, n = hyper.rho, hyper.gamma, hyper.n_local
    mt = big_m + 1.0 / rho
    ng = n * gamma
    a0 = float(np.max(mt) * np.max(1.0 / rho) / 2.0 + 4.0 * np.max(mt) ** 2)
    a1 = float(np.max(mt) ** 2 * np.max(1.0 / rho))
    if np.all(n == 1):
        r = 0.0
    else:
        x = float(np.max(ng * mt))
        r = float(np.max(ng / rho)) * x * (0.5 + x) + 4.0 * x * x
    ratio = float(np.min(ng) / np.max(ng))
    c = ratio if c is None else float(c)
    if not 0 < c <= 1:
        raise ValueError("c must lie in (0, 1]")
    cap = min(c * np.min(m) / (2.0 * a0 + math.sqrt(2.0 * a1 * c * np.min(m))),
              2.0 / np.max(m + mt))
    s46_ok = bool(ratio >= c * (1 - 1e-12) and np.max(ng) <= cap)
    min_ngm = float(np.min(ng * m))
    step_ok = bool(np.all(ng <= 2.0 / (m + mt)))
    ok = step_ok and (1.0 - min_ngm + r < 1.0 - min_ngm / 2.0)
    return ContractionReport(kappa_gamma(specs, hyper), r, a0, a1, c, ratio,
                             1.0 - min_ngm / 2.0, s46_ok, bool(ok))


def mode_offsets(specs, theta_star=None) -> np.ndarray:
    """Squared norms ``|A_i theta* - z_i*|^2``, ``z_i*`` minimising ``U_i``."""
    theta_star = find_mode(specs) if theta_star is None else theta_star
    zs = worker_minimizers(specs)
    return np.array([float(np.sum((s.matrix_a @ theta_star - z) ** 2))
                     for s, z in zip(specs, zs)])


def mean_map_norm(specs, rho) -> float:
    """Spectral norm of ``z -> Q^{-1} sum_i A_i^T z_i / rho_i``."""
    factor = build_precision(specs, rho)
    blocks = np.hstack([s.matrix_a.T / r for s, r in zip(specs, factor.rho)])
    return float(np.linalg.norm(np.linalg.solve(factor.q, blocks), 2))


@dataclass(frozen=True)
class BiasBound:
    """Bound on ``W2(pi_rho, pi)``; ``value`` is ``None`` when not applicable."""

    value: float | None
    applicable: bool
    reason: str
    a1: float
    a3: float
    m_u: float
    l_beta: float


def axda_bias_bound(specs, rho, offsets=None) -> BiasBound:
    """Upper bound on the Wasserstein-2 bias of the augmented marginal.

    ``sqrt(2/m_U) max(A_1, sqrt(A_3))`` with the ``A_1`` and ``A_3`` constants
    of the chi-square argument. Valid only when ``12 L_beta^2 <= m_U``.

    Args:
        specs: Worker potentials.
        rho: Tolerances.
        offsets: Precomputed :func:`mode_offsets` (optional).
    """
    b = len(specs)
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (b,)).copy()
    if np.any(rho <= 0):
        raise ValueError("rho must be positive")
    consts = model_constants(specs, rho)
    m_u, lb = consts.m_u, consts.l_beta
    _, big_m, dims = _constants(specs)
    d = specs[0].dim_in
    u2 = mode_offsets(specs) if offsets is None else np.asarray(offsets)
    lb2 = lb * lb
    base = d * lb2 / m_u + float(np.sum(rho * big_m ** 2 * u2))
    log_prod = float(np.sum(dims * np.log1p(rho * big_m)))
    a1 = base * (1.0 + 2.0 * lb2 / m_u) + 2.0 * lb2 ** 2 / m_u ** 2 + 0.5 * log_prod
    lam3 = float(np.linalg.eigvalsh(gram_sum(specs, rho ** 2 * big_m ** 3))[-1])
    expo = 2.0 * d * lam3 / m_u + 2.0 * float(np.sum(rho ** 2 * big_m ** 3 * u2)) \
        + 8.0 * lb2 ** 2 / m_u ** 2 + 8.0 * base * lb2 / m_u
    # prod^2 e^expo - 2 prod + 1 written to avoid cancellation for small rho.
    try:
        a3 = math.expm1(log_prod + expo) - 2.0 * math.expm1(0.5 * log_prod)
    except OverflowError:
        a3 = math.inf
    if 12.0 * lb2 > m_u:
        return BiasBound(None, False,
                         f"12 L_beta^2 = {12.0 * lb2:.6g} exceeds m_U = {m_u:.6g}",
                         a1, a3, m_u, lb)
    value = math.sqrt(2.0 / m_u) * max(a1, math.sqrt(max(a3, 0.0)))
    return BiasBound(value, True, "", a1, a3, m_u, lb)


@dataclass(frozen=True)
class MixingBudget:
    """Tolerance, step, local iterations and iteration count for accuracy ``eps``."""

    eps: float
    rho_eps: float
    gamma_eps: float
    gamma_eps_convex: float
    gamma_eps_smooth_hessian: float | None
    n_local_eps: int
    e0: float
    n_eps: int
    gradient_evals: int
    s46_ok: bool
    n_eps_at_hyper: int | None = None


def _root(lin: float, quad: float, rhs: float) -> float:
    """Positive root ``x`` of ``quad x^2 + lin x = rhs`` in a stable form."""
    if math.isinf(rhs):
        return math.inf
    return 2.0 * rhs / (lin + math.sqrt(lin * lin + 4.0 * quad * rhs))


def _homogeneous(values, name):
    v = np.asarray(values, dtype=float)
    if np.max(v) - np.min(v) > 1e-9 * np.max(np.abs(v)):
        raise ValueError(f"mixing budget needs identical {name} across workers")
    return float(v[0])


def _e0(m, big_m, rho, gamma, n, b, d, sum_dims, u2_total, k_norm) -> float:
    mt = big_m + 1.0 / rho
    kappa = max(abs(1.0 - gamma * m), abs(1.0 - gamma * mt))
    k2 = kappa * kappa
    trace_p0 = float(d)
    stationary = 2.0 / (n * (1.0 - k2)) * ((1.0 + k2) / (1.0 - k2) * gamma * big_m ** 2 * u2_total
                                          + (gamma / rho) * trace_p0 + 2.0 * sum_dims)
    one_step = 2.0 * b * gamma * n * (1.0 + trace_p0 / rho) + 4.0 * sum_dims
    e0_sq = 9.0 * (1.0 + k_norm ** 2) * 2.0 * n * gamma * (stationary + one_step)
    return math.sqrt(e0_sq)


def _n_iters(e0, eps, n, gamma, m) -> int:
    if math.isinf(eps) or e0 <= eps:
        return 1
    return max(1, math.ceil(2.0 * math.log(e0 / eps) / (n * gamma * m)))


def mixing_budget(specs, eps: float, hyper: HyperParams | None = None,
                  offsets=None) -> MixingBudget:
    """Budgets so that the three error sources each stay below ``eps/3``.

    Requires identical ``m_i`` and ``M_i`` across workers. ``rho_eps`` bounds
    the augmentation bias, ``gamma_eps`` the discretisation bias (the larger
    of the convex-only and Hessian-Lipschitz rules when every worker has a
    Hessian constant), ``N_eps`` is the largest local count keeping the
    contraction condition, and ``n_eps`` the resulting iteration count.

    Args:
        specs: Worker potentials.
        eps: Target accuracy in W2; ``math.inf`` is accepted.
        hyper: Optional homogeneous hyperparameters; the iteration count at
            those values is reported as ``n_eps_at_hyper``.
        offsets: Precomputed :func:`mode_offsets`.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    m_all, bigm_all, dims = _constants(specs)
    m = _homogeneous(m_all, "m_i")
    big_m = _homogeneous(bigm_all, "M_i")
    b = len(specs)
    d = specs[0].dim_in
    sum_dims = float(np.sum(dims))
    sum_dm = float(np.sum(dims * bigm_all))
    consts = model_constants(specs, np.zeros(b))
    m_u, sig = consts.m_u, consts.sigma_u_sq
    u2 = mode_offsets(specs) if offsets is None else np.asarray(offsets)
    u2_total = float(np.sum(u2))
    mu2 = float(np.sum(bigm_all ** 2 * u2))

    # Augmentation tolerance.
    r0 = 2.0 * sig * (d * sig + mu2) + 2.0 * sig ** 2
    r1 = d * sig + mu2 + sum_dm / 2.0
    r2 = 2.0 * d * big_m * sig + 2.0 * float(np.sum(bigm_all ** 3 * u2)) + 8.0 * sig ** 2 \
        + 8.0 * sig * (2.0 * d * sig + 2.0 * mu2)
    target = eps * math.sqrt(m_u) / (3.0 * math.sqrt(2.0))
    rho_eps = min(_root(r1, r0, target),
                  target / math.sqrt(r2 + (r2 / (12.0 * sig) + sum_dm) ** 2),
                  1.0 / (12.0 * sig),
                  _root(sum_dm, r2, 1.5))

    # Discretisation step.
    mt = big_m + 1.0 / rho_eps
    mlt = m + 1.0 / rho_eps
    rho_vec = np.full(b, rho_eps)
    k_norm = mean_map_norm(specs, rho_vec)
    c_rho = 4.0 * mt ** 2 * (1.0 + k_norm ** 2) / (5.0 * m)
    c0 = (mt ** 2 / 2.0) * (mt / mlt + 1.0 / 6.0) * sum_dims
    c2 = eps ** 2 / (9.0 * c_rho)
    cap_small = m / (40.0 * mt ** 2)
    g_convex = min(_root(sum_dims, c0, c2), cap_small)
    g_smooth = None
    if all(s.l_hess is not None for s in specs):
        big_l = max(s.l_hess for s in specs)
        dmax = float(np.max(dims))
        g_smooth = min(
            eps / (6.0 * b * math.sqrt(5.0 * dmax * c_rho * mt ** 2
                                       * (4.0 + dmax * big_l ** 2 * m / (20.0 * mt ** 4)))),
            cap_small,
            eps / (6.0 * b * (5.0 * c_rho * dmax * m ** 3 / mt ** 2)))
    gamma_eps = g_convex if g_smooth is None else max(g_convex, g_smooth)

    # Local iterations: largest N keeping N gamma under the contraction caps.
    a0 = mt / rho_eps / 2.0 + 4.0 * mt ** 2
    a1 = mt ** 2 / rho_eps
    ng_cap = min(m / (2.0 * a0 + math.sqrt(2.0 * a1 * m)), 2.0 / (m + mt))
    n_local = max(1, int(math.floor(ng_cap / gamma_eps * (1.0 + 1e-12))))
    s46_ok = n_local * gamma_eps <= ng_cap * (1.0 + 1e-12)

    e0 = _e0(m, big_m, rho_eps, gamma_eps, n_local, b, d, sum_dims, u2_total, k_norm)
    n_eps = _n_iters(e0, eps, n_local, gamma_eps, m)
    n_hyper = None
    if hyper is not None:
        r = _homogeneous(hyper.rho, "rho_i")
        g = _homogeneous(hyper.gamma, "gamma_i")
        nl = int(_homogeneous(hyper.n_local, "N_i"))
        e0_h = _e0(m, big_m, r, g, nl, b, d, sum_dims, u2_total, mean_map_norm(specs, hyper.rho))
        n_hyper = _n_iters(e0_h, eps, nl, g, m)
    return MixingBudget(float(eps), rho_eps, gamma_eps, g_convex, g_smooth, n_local, e0, n_eps,
                        n_eps * n_local * b, bool(s46_ok), n_hyper)


@dataclass(frozen=True)
class BoundReport:
    """Flat summary of every bound for one configuration."""

    kappa_gamma: float
    r_term: float
    contraction_ok: bool
    s46_ok: bool
    w2_bias_axda: float | None
    bias_reason: str
    rho_eps: float | None = None
    gamma_eps: float | None = None
    n_local_eps: int | None = None
    n_eps: int | None = None
    gradient_evals: int | None = None

    def to_text(self) -> str:
        """``key = value`` lines, one per field."""
        lines = []
        for key, val in asdict(self).items():
            lines.append(f"{key} = {'' if val is None else val}")
        return "\n".join(lines) + "\n"


def bound_report(specs, hyper: HyperParams, eps: float | None = None) -> BoundReport:
    """Contraction, bias and (optionally) budget numbers for ``hyper``."""
    cr = check_contraction(specs, hyper)
    bias = axda_bias_bound(specs, hyper.rho)
    budget = None
    if eps is not None:
        budget = mixing_budget(specs, eps)
    return BoundReport(
        cr.kappa_gamma, cr.r_term, cr.contraction_ok, cr.s46_ok, bias.value, bias.reason,
        None if budget is None else budget.rho_eps,
        None if budget is None else budget.gamma_eps,
        None if budget is None else budget.n_local_eps,
        None if budget is None else budget.n_eps,
        None if budget is None else budget.gradient_evals,
    )
