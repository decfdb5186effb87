"""Conditional samplers of the split Gibbs scheme.

Workers refresh ``z_i`` with unadjusted Langevin steps on
``U_i(z_i) + |z_i - A_i theta|^2 / (2 rho_i)``; the master draws ``theta``
exactly from its Gaussian conditional with precision
``Q = sum_i A_i^T A_i / rho_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .validation import check_int, positive_vector


@dataclass(frozen=True)
class HyperParams:
    """Per-worker tolerances, step sizes and local iteration counts."""

    rho: np.ndarray
    gamma: np.ndarray
    n_local: np.ndarray
    validated: bool = False

    def __post_init__(self):
        rho = positive_vector(self.rho, "rho")
        b = rho.shape[0]
        gamma = positive_vector(self.gamma, "gamma", b)
        n_local = np.atleast_1d(np.asarray(self.n_local))
        if n_local.shape == (1,) and b != 1:
            n_local = np.full(b, n_local[0])
        n_local = np.array([check_int(n, "n_local", 1) for n in n_local], dtype=int)
        if n_local.shape[0] != b:
            raise ValueError("n_local must have one entry per worker")
        for name, arr in (("rho", rho), ("gamma", gamma), ("n_local", n_local)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n_workers(self) -> int:
        return int(self.rho.shape[0])

    def with_validated(self, flag: bool = True) -> "HyperParams":
        return replace(self, validated=flag)


def step_limit(specs, rho) -> np.ndarray:
    """Largest admissible step ``rho_i / (1 + rho_i M_i)`` per worker."""
    big_m = np.array([s.m_upper for s in specs])
    rho = np.asarray(rho, dtype=float)
    return rho / (1.0 + rho * big_m)


def step_violations(specs, hyper: HyperParams, rtol: float = 1e-12) -> list[int]:
    """Indices of workers whose step exceeds ``rho_i / (1 + rho_i M_i)``."""
    if len(specs) != hyper.n_workers:
        raise ValueError(f"{len(specs)} potentials but {hyper.n_workers} hyperparameter entries")
    limit = step_limit(specs, hyper.rho)
    return [int(i) for i in np.flatnonzero(hyper.gamma > limit * (1.0 + rtol))]


def make_hyperparams(specs, rho, gamma, n_local=1, override: bool = False) -> HyperParams:
    """Build :class:`HyperParams`, rejecting steps above the stability limit.

    Args:
        specs: Worker potentials.
        rho, gamma: Scalars or length-``b`` vectors.
        n_local: Local iteration counts.
        override: Accept violating steps (the result is not marked validated).
    """
    b = len(specs)
    hyper = HyperParams(positive_vector(rho, "rho", b), positive_vector(gamma, "gamma", b),
                        n_local)
    bad = step_violations(specs, hyper)
    if bad and not override:
        limit = step_limit(specs, hyper.rho)
        raise ValueError(
            f"step size above rho_i/(1 + rho_i M_i) for workers {bad}: "
            f"gamma={hyper.gamma[bad]}, limit={limit[bad]}"
        )
    return hyper.with_validated(not bad)


@dataclass(frozen=True)
class PrecisionFactor:
    """``Q = sum_i A_i^T A_i / rho_i`` with its lower Cholesky factor."""

    q: np.ndarray
    chol: np.ndarray
    log_det: float
    rho: np.ndarray = field(repr=False)


@dataclass
class ChainState:
    """Current ``(theta, z_1, ..., z_b)`` of the extended chain."""

    theta: np.ndarray
    z: list
    iteration: int = 0

    def copy(self) -> "ChainState":
        return ChainState(self.theta.copy(), [zi.copy() for zi in self.z], self.iteration)


class StreamSet:
    """Counter-based random streams: one per worker plus one for the master.

    Every stream is a Philox generator keyed by ``(seed, role)``, so the
    values a worker sees never depend on the order in which workers run.
    """

    def __init__(self, seed: int, n_workers: int):
        self.seed = int(seed)
        self.master = self._stream((0,))
        self.workers = [self._stream((1, i)) for i in range(n_workers)]

    def _stream(self, key) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=key)
        return np.random.Generator(np.random.Philox(ss))

    def extra(self, key: int) -> np.random.Generator:
        """An additional independent stream, e.g. for minibatch indices."""
        return self._stream((2, int(key)))


class NoiseBuffer:
    """Serves standard normal blocks of a fixed shape from one stream.

    Blocks are drawn ``chunk`` at a time. The sequence of values equals the
    one obtained by drawing each block separately.
    """

    def __init__(self, rng: np.random.Generator, shape, chunk: int = 1024):
        self.rng = rng
        self.shape = tuple(shape)
        self.chunk = int(chunk)
        self._buf = np.empty((0,) + self.shape)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos >= self._buf.shape[0]:
            self._buf = self.rng.standard_normal((self.chunk,) + self.shape)
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out


def _lmc_update(z, a_theta, grad, rho_i, gamma_i, noise):
    # Operation order is part of the contract: keep it in one place.
    return (1.0 - gamma_i / rho_i) * z + (gamma_i / rho_i) * a_theta - gamma_i * grad \
        + np.sqrt(2.0 * gamma_i) * noise


def lmc_local_step(z, theta, spec, rho_i: float, gamma_i: float, noise) -> np.ndarray:
    """One Langevin step on ``U_i(z) + |z - A_i theta|^2 / (2 rho_i)``.

    Returns ``(1 - g/r) z + (g/r) A_i theta - g grad U_i(z) + sqrt(2 g) noise``.
    """
    a_theta = theta if spec.is_identity else spec.matrix_a @ theta
    return _lmc_update(z, a_theta, spec.grad_u(z), rho_i, gamma_i, noise)


def local_chain_from_noise(z0, a_theta, spec, rho_i: float, gamma_i: float, noise) -> np.ndarray:
    """Apply one Langevin step per row of ``noise`` starting at ``z0``."""
    # Same expression and evaluation order as _lmc_update with the loop
    # invariant products hoisted; elementwise products are reproducible, so
    # the result is bit-identical.
    gamma_i, rho_i = float(gamma_i), float(rho_i)
    keep = 1.0 - gamma_i / rho_i
    pull = (gamma_i / rho_i) * a_theta
    kicks = np.sqrt(2.0 * gamma_i) * noise
    z = z0
    grad_u = spec.grad_u
    for k in range(noise.shape[0]):
        z = keep * z + pull - gamma_i * grad_u(z) + kicks[k]
    return z


def run_local_chain(z0, theta, spec, rho_i: float, gamma_i: float, n_steps: int,
                    rng: np.random.Generator) -> np.ndarray:
    """``n_steps`` Langevin steps with noise drawn in order from ``rng``."""
    n_steps = check_int(n_steps, "n_steps", 1)
    noise = rng.standard_normal((n_steps, spec.dim_out))
    a_theta = theta if spec.is_identity else spec.matrix_a @ theta
    return local_chain_from_noise(np.asarray(z0, dtype=float), a_theta, spec, rho_i, gamma_i,
                                  noise)


def build_precision(specs, rho) -> PrecisionFactor:
    """Assemble and factorise ``Q = sum_i A_i^T A_i / rho_i``."""
    rho = positive_vector(rho, "rho", len(specs))
    dim = specs[0].dim_in
    q = np.zeros((dim, dim))
    for s, r in zip(specs, rho):
        q += (s.matrix_a.T @ s.matrix_a) / r
    q = 0.5 * (q + q.T)
    try:
        chol = np.linalg.cholesky(q)
    except np.linalg.LinAlgError:
        raise ValueError("precision sum_i A_i^T A_i / rho_i is singular; "
                         "theta is not identifiable from the workers") from None
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return PrecisionFactor(q, chol, log_det, rho)


def master_rhs(z, specs, rho) -> np.ndarray:
    """``sum_i A_i^T z_i / rho_i``."""
    out = np.zeros(specs[0].dim_in)
    for zi, s, r in zip(z, specs, rho):
        out += (zi if s.is_identity else s.matrix_a.T @ zi) / r
    return out


def conditional_mean(z, factor: PrecisionFactor, specs, rho) -> np.ndarray:
    """Mean of ``theta`` given all ``z_i``."""
    return cho_solve((factor.chol, True), master_rhs(z, specs, rho), check_finite=False)


def master_draw(z, factor: PrecisionFactor, specs, rho, noise) -> np.ndarray:
    """Exact draw from ``N(mu(z), Q^{-1})`` given standard normal ``noise``."""
    mu = conditional_mean(z, factor, specs, rho)
    return mu + solve_triangular(factor.chol, noise, lower=True, trans="T", check_finite=False)


def initial_state(specs, rho, factor: PrecisionFactor, theta_star, noise) -> ChainState:
    """Start at ``z_i = A_i theta*`` with ``theta`` drawn from its conditional."""
    theta_star = np.asarray(theta_star, dtype=float)
    z = [s.matrix_a @ theta_star for s in specs]
    theta = master_draw(z, factor, specs, rho, noise)
    return ChainState(theta, z, 0)
