"""Synchronous master/worker loop over a simulated cluster.

Per global iteration every worker runs its local Langevin chain from the
current ``theta``; after a barrier the master draws a new ``theta``. Worker
latencies only feed the simulated wall-clock model and never touch sample
values, so runs are reproducible whatever the thread count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .kernels import (ChainState, HyperParams, NoiseBuffer, StreamSet, build_precision,
                      initial_state, local_chain_from_noise, master_draw)
from .model import find_mode
from .validation import check_int, positive_vector

DIVERGENCE_NORM = 1e12


class DivergenceError(RuntimeError):
    """Raised when the chain state blows up or stops being finite."""

    def __init__(self, iteration: int, what: str):
        super().__init__(f"chain diverged at iteration {iteration} ({what})")
        self.iteration = iteration


@dataclass(frozen=True)
class ClusterProfile:
    """Per-worker cost of one local step and cost of one communication round."""

    tau: np.ndarray
    comm_cost: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "tau", positive_vector(self.tau, "tau"))
        if self.comm_cost < 0:
            raise ValueError("comm_cost must be nonnegative")

    @classmethod
    def homogeneous(cls, n_workers: int, tau: float = 1.0, comm_cost: float = 0.0):
        return cls(np.full(n_workers, float(tau)), comm_cost)

    @property
    def n_workers(self) -> int:
        return int(self.tau.shape[0])


@dataclass(frozen=True)
class RunConfig:
    """Iteration budget, burn-in, thinning and seed."""

    total_iters: int
    burn_in: int = 0
    thin: int = 1
    seed: int = 0
    record_z: bool = False

    def __post_init__(self):
        check_int(self.total_iters, "total_iters", 1)
        check_int(self.burn_in, "burn_in", 0)
        check_int(self.thin, "thin", 1)
        if self.burn_in >= self.total_iters:
            raise ValueError("burn_in must be smaller than total_iters")

    @property
    def n_kept(self) -> int:
        return math.ceil((self.total_iters - self.burn_in) / self.thin)

    def is_kept(self, t: int) -> bool:
        return t >= self.burn_in and (t - self.burn_in) % self.thin == 0


@dataclass
class RunReport:
    """Chain output plus bookkeeping.

    ``theta_samples[k]`` is the state after global iteration
    ``kept_iters[k]`` (1-based).
    """

    theta_samples: np.ndarray
    kept_iters: np.ndarray
    wall_model: float
    iter_count: int
    sampler: str = "dglmc"
    hyper: HyperParams | None = None
    z_samples: list | None = None
    final_state: ChainState | None = None
    acceptance_rate: float | None = None
    diagnostics: dict = field(default_factory=dict)


def allocate_local_iters(profile: ClusterProfile, n_avg: float) -> np.ndarray:
    """Split ``n_avg * b`` local steps in proportion to worker speed.

    ``N_i = max(1, round(q_i n_avg b))`` with ``q_i ∝ 1 / tau_i``; halves
    round up.
    """
    if n_avg < 1:
        raise ValueError("n_avg must be >= 1")
    inv = 1.0 / profile.tau
    q = inv / inv.sum()
    raw = q * n_avg * profile.n_workers
    return np.maximum(1, np.floor(raw + 0.5)).astype(int)


def wall_model(hyper: HyperParams, profile: ClusterProfile, n_iters: int) -> float:
    """Simulated time ``sum_t [2 c_com + max_i N_i tau_i]``."""
    per_iter = 2.0 * profile.comm_cost + float(np.max(hyper.n_local * profile.tau))
    return n_iters * per_iter


def thread_count(n_threads: int | None) -> int:
    """Explicit count, else ``DGLMC_THREADS`` (0 or unset means serial)."""
    if n_threads is None:
        n_threads = int(os.environ.get("DGLMC_THREADS", "0") or 0)
    return max(0, int(n_threads))


def _check_inputs(specs, hyper: HyperParams, override: bool):
    if len(specs) != hyper.n_workers:
        raise ValueError(f"{len(specs)} potentials but {hyper.n_workers} hyperparameter entries")
    dims = {s.dim_in for s in specs}
    if len(dims) != 1:
        raise ValueError("all A_i must share the same input dimension")
    if not (hyper.validated or override):
        raise ValueError("hyperparameters are not validated; pass override=True to run anyway")


def _diverged(x) -> bool:
    v = float(x @ x)
    return not v < DIVERGENCE_NORM ** 2


class _Sweep:
    """One global iteration's worker phase, serial or on a thread pool."""

    def __init__(self, specs, hyper, buffers, n_threads):
        self.specs = specs
        self.rho = [float(r) for r in hyper.rho]
        self.gamma = [float(g) for g in hyper.gamma]
        self.buffers = buffers
        self.pool = ThreadPoolExecutor(n_threads) if n_threads > 0 else None

    def _one(self, i, z_i, theta):
        s = self.specs[i]
        a_theta = theta if s.is_identity else s.matrix_a @ theta
        return local_chain_from_noise(z_i, a_theta, s, self.rho[i], self.gamma[i],
                                      self.buffers[i].next())

    def __call__(self, z, theta):
        n = len(self.specs)
        if self.pool is None:
            return [self._one(i, z[i], theta) for i in range(n)]
        return list(self.pool.map(lambda i: self._one(i, z[i], theta), range(n)))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def run_dglmc(specs, hyper: HyperParams, config: RunConfig, profile: ClusterProfile | None = None,
              override: bool = False, n_threads: int | None = None, theta_star=None,
              state: ChainState | None = None, chunk: int = 1024) -> RunReport:
    """Run the distributed split Gibbs sampler.

    Args:
        specs: Worker potentials.
        hyper: Tolerances, steps and local iteration counts.
        config: Iteration budget and seed.
        profile: Worker latencies; defaults to unit costs and free communication.
        override: Run even if ``hyper.validated`` is false.
        n_threads: Worker threads; ``None`` reads ``DGLMC_THREADS``.
        theta_star: Mode used for the default start; computed if omitted.
        state: Explicit starting state (overrides the default start).
        chunk: Noise draws are pre-generated ``chunk`` iterations at a time.

    Returns:
        A :class:`RunReport`. Output depends only on ``specs``, ``hyper`` and
        ``config.seed``.

    Raises:
        DivergenceError: if any state norm exceeds 1e12 or is not finite.
    """
    _check_inputs(specs, hyper, override)
    b = len(specs)
    profile = profile or ClusterProfile.homogeneous(b)
    if profile.n_workers != b:
        raise ValueError("cluster profile size does not match the number of workers")
    dim = specs[0].dim_in
    factor = build_precision(specs, hyper.rho)
    streams = StreamSet(config.seed, b)
    master_noise = NoiseBuffer(streams.master, (dim,), chunk)
    if state is None:
        if theta_star is None:
            theta_star = find_mode(specs)
        state = initial_state(specs, hyper.rho, factor, theta_star, master_noise.next())
    else:
        state = state.copy()
    buffers = [NoiseBuffer(streams.workers[i], (int(hyper.n_local[i]), s.dim_out), chunk)
               for i, s in enumerate(specs)]
    sweep = _Sweep(specs, hyper, buffers, thread_count(n_threads))

    theta, z = state.theta, list(state.z)
    rho = hyper.rho
    samples = np.empty((config.n_kept, dim))
    kept = np.empty(config.n_kept, dtype=np.int64)
    z_rec = [] if config.record_z else None
    k = 0
    try:
        for t in range(config.total_iters):
            z = sweep(z, theta)
            for i, zi in enumerate(z):
                if _diverged(zi):
                    raise DivergenceError(t + 1, f"z_{i}")
            theta = master_draw(z, factor, specs, rho, master_noise.next())
            if _diverged(theta):
                raise DivergenceError(t + 1, "theta")
            if config.is_kept(t):
                samples[k] = theta
                kept[k] = t + 1
                if z_rec is not None:
                    z_rec.append([zi.copy() for zi in z])
                k += 1
    finally:
        sweep.close()
    final = ChainState(theta, z, state.iteration + config.total_iters)
    return RunReport(samples, kept, wall_model(hyper, profile, config.total_iters),
                     config.total_iters, "dglmc", hyper, z_rec, final)


def weighted_distance(z_a, z_b, hyper: HyperParams) -> float:
    """``sqrt(sum_i |z_a_i - z_b_i|^2 / (N_i gamma_i))``."""
    w = 1.0 / (hyper.n_local * hyper.gamma)
    return float(np.sqrt(sum(wi * float(np.sum((a - c) ** 2)) for wi, a, c in zip(w, z_a, z_b))))


def run_coupled_pair(specs, hyper: HyperParams, config: RunConfig, state_a: ChainState,
                     state_b: ChainState, override: bool = False) -> np.ndarray:
    """Run two chains on shared noise and track their ``z`` distance.

    Returns:
        Array of ``config.total_iters + 1`` distances in the norm weighting
        block ``i`` by ``1 / (N_i gamma_i)``; entry 0 is the starting distance.
    """
    _check_inputs(specs, hyper, override)
    for st in (state_a, state_b):
        if len(st.z) != len(specs) or any(zi.shape != (s.dim_out,) for zi, s in zip(st.z, specs)):
            raise ValueError("chain state dimensions do not match the potentials")
    dim = specs[0].dim_in
    factor = build_precision(specs, hyper.rho)
    streams = StreamSet(config.seed, len(specs))
    rho, gamma = hyper.rho, hyper.gamma
    ta, za = state_a.theta.copy(), [z.copy() for z in state_a.z]
    tb, zb = state_b.theta.copy(), [z.copy() for z in state_b.z]
    out = np.empty(config.total_iters + 1)
    out[0] = weighted_distance(za, zb, hyper)
    for t in range(config.total_iters):
        for i, s in enumerate(specs):
            noise = streams.workers[i].standard_normal((int(hyper.n_local[i]), s.dim_out))
            aa = ta if s.is_identity else s.matrix_a @ ta
            ab = tb if s.is_identity else s.matrix_a @ tb
            za[i] = local_chain_from_noise(za[i], aa, s, rho[i], gamma[i], noise)
            zb[i] = local_chain_from_noise(zb[i], ab, s, rho[i], gamma[i], noise)
            if _diverged(za[i]) or _diverged(zb[i]):
                raise DivergenceError(t + 1, f"z_{i}")
        xi = streams.master.standard_normal(dim)
        ta = master_draw(za, factor, specs, rho, xi)
        tb = master_draw(zb, factor, specs, rho, xi)
        out[t + 1] = weighted_distance(za, zb, hyper)
    return out
