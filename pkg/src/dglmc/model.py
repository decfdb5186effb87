"""Worker potentials, data sharding and global model constants.

Each worker ``i`` owns a potential ``U_i`` acting on an auxiliary variable
``z_i = A_i theta``. The posterior is ``pi(theta) ∝ exp(-sum_i U_i(A_i theta))``.
Two concrete potentials are provided: a Gaussian likelihood with an optional
Gaussian prior term, and a logistic-regression likelihood with an isotropic
Gaussian prior split evenly across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import as_vector, check_spd

# Sup norm of the third derivative of t -> log(1 + e^t).
LOGISTIC_THIRD_DERIV_BOUND = 1.0 / (6.0 * np.sqrt(3.0))


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.flags.writeable = False
    return out


class PotentialSpec:
    """One worker's potential ``U_i`` together with its curvature constants.

    Subclasses implement :meth:`potential`, :meth:`grad_u` and :meth:`hess_u`.
    Instances are immutable once built and safe to share between threads.

    Attributes:
        dim_out: Dimension ``d_i`` of the worker variable ``z_i``.
        matrix_a: Linear map ``A_i`` of shape ``(d_i, d)``.
        m_lower: Strong-convexity constant of ``U_i``.
        m_upper: Lipschitz constant of ``grad U_i``.
        l_hess: Lipschitz constant of the Hessian, or ``None`` if unknown.
        shard: Local observations (may have zero rows).
    """

    dim_out: int
    matrix_a: np.ndarray
    m_lower: float
    m_upper: float
    l_hess: float | None
    shard: np.ndarray

    def _set_common(self, matrix_a, m_lower, m_upper, l_hess, shard):
        self.matrix_a = _frozen(np.atleast_2d(matrix_a))
        self.dim_out = int(self.matrix_a.shape[0])
        self.m_lower = float(m_lower)
        self.m_upper = float(m_upper)
        self.l_hess = None if l_hess is None else float(l_hess)
        self.shard = _frozen(shard)
        if not (0 < self.m_lower <= self.m_upper * (1 + 1e-12)):
            raise ValueError(
                f"need 0 < m_lower <= m_upper, got {self.m_lower}, {self.m_upper}"
            )
        # A_i = I lets the kernels skip a matrix product.
        a = self.matrix_a
        self.is_identity = a.shape[0] == a.shape[1] and np.array_equal(a, np.eye(a.shape[0]))

    @property
    def dim_in(self) -> int:
        return int(self.matrix_a.shape[1])

    @property
    def n_obs(self) -> int:
        return int(self.shard.shape[0])

    def potential(self, z: np.ndarray) -> float:
        raise NotImplementedError

    def potential_rows(self, zs: np.ndarray) -> np.ndarray:
        """:meth:`potential` evaluated at every row of ``zs``."""
        return np.array([self.potential(z) for z in zs])

    def grad_u(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess_u(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def data_grad(self, z: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Sum of per-observation likelihood gradients over rows ``idx``."""
        raise NotImplementedError

    def prior_grad(self, z: np.ndarray) -> np.ndarray:
        """Gradient of the part of ``U_i`` that does not depend on data."""
        raise NotImplementedError


class GaussianPotential(PotentialSpec):
    """``U(z) = sum_j (z - y_j)^T P (z - y_j) / 2 + (z - mu0)^T P0 (z - mu0) / 2``.

    ``P`` is the observation precision and ``P0`` an optional prior precision.
    ``m_lower`` and ``m_upper`` are the extreme eigenvalues of the total
    precision, so the constants are exact.
    """

    def __init__(self, obs, obs_precision, prior_precision=None, prior_mean=None,
                 matrix_a=None):
        obs = np.asarray(obs, dtype=float)
        obs_precision = np.atleast_2d(np.asarray(obs_precision, dtype=float))
        dim = obs_precision.shape[0]
        obs = obs.reshape(-1, dim)
        if prior_precision is None:
            prior_precision = np.zeros((dim, dim))
            prior_mean = np.zeros(dim)
        prior_precision = np.atleast_2d(np.asarray(prior_precision, dtype=float))
        prior_mean = np.zeros(dim) if prior_mean is None else as_vector(prior_mean, "prior_mean", dim)
        self.obs_precision = _frozen(obs_precision)
        self.prior_precision = _frozen(prior_precision)
        self.prior_mean = _frozen(prior_mean)
        self.precision = _frozen(obs.shape[0] * obs_precision + prior_precision)
        self.linear = _frozen(obs_precision @ obs.sum(axis=0) + prior_precision @ prior_mean)
        self.has_prior = bool(np.any(self.prior_precision != 0))
        self.offset = 0.5 * float(np.einsum("ij,jk,ik->", obs, obs_precision, obs)) \
            + 0.5 * float(prior_mean @ prior_precision @ prior_mean)
        eig = np.linalg.eigvalsh(self.precision)
        if eig[0] <= 0:
            raise ValueError("worker potential is not strongly convex (no data and no prior)")
        if matrix_a is None:
            matrix_a = np.eye(dim)
        self._set_common(matrix_a, eig[0], eig[-1], 0.0, obs)

    @property
    def center(self) -> np.ndarray:
        """Minimiser of ``U``."""
        return np.linalg.solve(self.precision, self.linear)

    def potential(self, z):
        z = np.asarray(z, dtype=float)
        return 0.5 * float(z @ self.precision @ z) - float(self.linear @ z) + self.offset

    def potential_rows(self, zs):
        zs = np.atleast_2d(zs)
        quad = np.einsum("ij,jk,ik->i", zs, self.precision, zs)
        return 0.5 * quad - zs @ self.linear + self.offset

    def grad_u(self, z):
        return self.precision @ z - self.linear

    def hess_u(self, z):
        return np.array(self.precision)

    def data_grad(self, z, idx):
        idx = np.asarray(idx, dtype=int)
        return self.obs_precision @ (idx.size * z - self.shard[idx].sum(axis=0))

    def prior_grad(self, z):
        return self.prior_precision @ (z - self.prior_mean)


def quadratic_potential(precision, center, matrix_a=None) -> GaussianPotential:
    """Data-free quadratic ``U(z) = (z - c)^T H (z - c) / 2``."""
    precision = check_spd(precision, "precision")
    dim = precision.shape[0]
    return GaussianPotential(np.zeros((0, dim)), np.zeros((dim, dim)), precision,
                             center, matrix_a)


def _sigmoid(t):
    # tanh form: overflow-free and faster than expit on short vectors.
    return 0.5 + 0.5 * np.tanh(0.5 * t)


class LogisticPotential(PotentialSpec):
    """Logistic log-likelihood of one shard plus a share of a Gaussian prior.

    ``U(t) = sum_j [log(1 + exp(x_j^T t)) - y_j x_j^T t] + prior_weight * |t|^2 / 2``.
    """

    def __init__(self, features, labels, prior_weight: float):
        x = np.atleast_2d(np.asarray(features, dtype=float))
        y = as_vector(labels, "labels", x.shape[0]) if x.shape[0] else np.zeros(0)
        if prior_weight <= 0:
            raise ValueError("prior_weight must be positive")
        self.features = _frozen(x)
        self._features_t = _frozen(np.ascontiguousarray(x.T))
        # sigma(t) - y = tanh(t/2)/2 + (1/2 - y): the label part of the gradient is constant.
        self._half_t = _frozen(0.5 * self._features_t)
        self._grad_offset = _frozen(self._features_t @ (0.5 - y))
        self.labels = _frozen(y)
        self.prior_weight = float(prior_weight)
        self.has_prior = True
        dim = x.shape[1]
        lam = np.linalg.eigvalsh(x.T @ x)[-1] if x.shape[0] else 0.0
        l_hess = LOGISTIC_THIRD_DERIV_BOUND * float(np.sum(np.linalg.norm(x, axis=1) ** 3))
        self._set_common(np.eye(dim), prior_weight, prior_weight + 0.25 * lam, l_hess,
                         np.column_stack([y, x]))

    def potential(self, z):
        t = self.features @ z
        return float(np.sum(np.logaddexp(0.0, t) - self.labels * t)) \
            + 0.5 * self.prior_weight * float(z @ z)

    def potential_rows(self, zs):
        zs = np.atleast_2d(zs)
        t = zs @ self._features_t
        return np.sum(np.logaddexp(0.0, t) - self.labels * t, axis=1) \
            + 0.5 * self.prior_weight * np.einsum("ij,ij->i", zs, zs)

    def grad_u(self, z):
        return self._half_t @ np.tanh(z @ self._half_t) + self._grad_offset + self.prior_weight * z

    def hess_u(self, z):
        s = _sigmoid(self.features @ z)
        w = s * (1.0 - s)
        return (self.features.T * w) @ self.features + self.prior_weight * np.eye(z.shape[0])

    def data_grad(self, z, idx):
        x = self.features[idx]
        return (_sigmoid(x @ z) - self.labels[idx]) @ x

    def prior_grad(self, z):
        return self.prior_weight * z


@dataclass
class ShardedDataset:
    """Observations split across workers.

    Gaussian-toy rows are observation vectors ``y``. Logistic rows are
    ``[label, x_1, ..., x_d]``.
    """

    shards: list
    kind: str = "gaussian"
    theta_gen: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("gaussian", "logistic"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        self.shards = [np.atleast_2d(np.asarray(s, dtype=float)) for s in self.shards]
        widths = {s.shape[1] for s in self.shards if s.size}
        if len(widths) > 1:
            raise ValueError("shards have inconsistent widths")

    @property
    def n_total(self) -> int:
        return int(sum(s.shape[0] for s in self.shards if s.size))

    @property
    def n_shards(self) -> int:
        return len(self.shards)

    @property
    def width(self) -> int:
        return max(s.shape[1] for s in self.shards)

    @property
    def feature_dim(self) -> int:
        return self.width - 1 if self.kind == "logistic" else 0

    def stacked(self) -> np.ndarray:
        return np.vstack([s for s in self.shards if s.size])

    @classmethod
    def split_even(cls, rows, n_shards: int, kind: str = "gaussian", theta_gen=None):
        """Split rows into ``n_shards`` contiguous blocks of near-equal size."""
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if n_shards < 1:
            raise ValueError("n_shards must be >= 1")
        if n_shards > rows.shape[0]:
            raise ValueError(f"cannot split {rows.shape[0]} rows into {n_shards} shards")
        return cls(np.array_split(rows, n_shards), kind, theta_gen)


def gaussian_model(mean_prior, cov_prior, cov_like, observations) -> list[PotentialSpec]:
    """Conjugate Gaussian model with the prior folded into worker 0.

    Args:
        mean_prior: Prior mean, shape ``(d,)``.
        cov_prior: Prior covariance, SPD ``(d, d)``.
        cov_like: Observation covariance, SPD ``(d, d)``.
        observations: :class:`ShardedDataset` or list of ``(n_i, d)`` arrays.

    Returns:
        One :class:`GaussianPotential` per shard, each with ``A_i = I``.
    """
    cov_prior = check_spd(cov_prior, "cov_prior")
    cov_like = check_spd(cov_like, "cov_like")
    dim = cov_prior.shape[0]
    if cov_like.shape != (dim, dim):
        raise ValueError("cov_prior and cov_like must have the same shape")
    mean_prior = as_vector(mean_prior, "mean_prior", dim)
    shards = observations.shards if isinstance(observations, ShardedDataset) else observations
    if len(shards) == 0:
        raise ValueError("need at least one worker")
    obs_prec = np.linalg.inv(cov_like)
    obs_prec = 0.5 * (obs_prec + obs_prec.T)
    prior_prec = np.linalg.inv(cov_prior)
    prior_prec = 0.5 * (prior_prec + prior_prec.T)
    specs = []
    for i, block in enumerate(shards):
        block = np.asarray(block, dtype=float).reshape(-1, dim)
        if i > 0 and block.shape[0] == 0:
            raise ValueError(f"worker {i} holds no observations and no prior term")
        if i == 0:
            specs.append(GaussianPotential(block, obs_prec, prior_prec, mean_prior))
        else:
            specs.append(GaussianPotential(block, obs_prec))
    return specs


def logistic_model(features, labels, prior_prec: float, shards: int) -> list[PotentialSpec]:
    """Bayesian logistic regression split into ``shards`` contiguous blocks.

    The prior ``N(0, I / prior_prec)`` is split evenly, each worker carrying
    precision ``prior_prec / shards``.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.size == 0:
        raise ValueError("features must be a non-empty 2-D array")
    y = as_vector(labels, "labels", x.shape[0])
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if prior_prec <= 0:
        raise ValueError("prior_prec must be positive")
    if shards < 1 or shards > x.shape[0]:
        raise ValueError(f"need 1 <= shards <= n, got shards={shards}, n={x.shape[0]}")
    blocks = np.array_split(np.arange(x.shape[0]), shards)
    return [LogisticPotential(x[idx], y[idx], prior_prec / shards) for idx in blocks]


def logistic_model_from_dataset(dataset: ShardedDataset, prior_prec: float) -> list[PotentialSpec]:
    """Build logistic potentials from an already-sharded dataset."""
    if dataset.kind != "logistic":
        raise ValueError("dataset is not a logistic-regression dataset")
    b = dataset.n_shards
    out = []
    for block in dataset.shards:
        if block.shape[0] == 0:
            raise ValueError("logistic shards must be non-empty")
        y = block[:, 0]
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        out.append(LogisticPotential(block[:, 1:], y, prior_prec / b))
    return out


@dataclass(frozen=True)
class ModelConstants:
    """Global constants derived from the worker potentials.

    Attributes:
        m_u: ``lambda_min(sum_i m_i A_i^T A_i)``, strong convexity of ``-log pi``.
        sigma_u_sq: ``||A^T A|| max_i M_i^2 / m_u``.
        l_beta: ``lambda_max(sum_i rho_i M_i^2 A_i^T A_i)^(1/2)``.
    """

    m_u: float
    sigma_u_sq: float
    l_beta: float


def gram_sum(specs, weights=None) -> np.ndarray:
    """``sum_i w_i A_i^T A_i`` (unit weights by default)."""
    dim = specs[0].dim_in
    out = np.zeros((dim, dim))
    for i, s in enumerate(specs):
        w = 1.0 if weights is None else weights[i]
        out += w * (s.matrix_a.T @ s.matrix_a)
    return out


def check_full_rank(specs) -> None:
    """Reject worker maps whose Gram sum is singular."""
    dims = {s.dim_in for s in specs}
    if len(dims) != 1:
        raise ValueError("all A_i must share the same input dimension")
    eig = np.linalg.eigvalsh(gram_sum(specs))
    if eig[0] <= 1e-12 * max(eig[-1], 1.0):
        raise ValueError("sum_i A_i^T A_i is rank deficient; theta is not identifiable")


def model_constants(specs, rho) -> ModelConstants:
    """Compute ``m_U``, ``sigma_U^2`` and ``L_beta``.

    ``rho`` may contain zeros, which gives the ``L_beta = 0`` limit.
    """
    check_full_rank(specs)
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (len(specs),))
    if np.any(rho < 0):
        raise ValueError("rho must be nonnegative")
    m = np.array([s.m_lower for s in specs])
    big_m = np.array([s.m_upper for s in specs])
    m_u = float(np.linalg.eigvalsh(gram_sum(specs, m))[0])
    ata_norm = float(np.linalg.eigvalsh(gram_sum(specs))[-1])
    sigma_u_sq = ata_norm * float(np.max(big_m ** 2)) / m_u
    lb = float(np.linalg.eigvalsh(gram_sum(specs, rho * big_m ** 2))[-1])
    return ModelConstants(m_u, sigma_u_sq, float(np.sqrt(max(lb, 0.0))))


class NegLogPosterior:
    """``theta -> sum_i U_i(A_i theta)`` with gradient and Hessian."""

    def __init__(self, specs):
        check_full_rank(specs)
        self.specs = list(specs)
        self.dim = specs[0].dim_in

    def __call__(self, theta):
        return self.value(theta)

    def value(self, theta) -> float:
        return float(sum(s.potential(s.matrix_a @ theta) for s in self.specs))

    def grad(self, theta) -> np.ndarray:
        out = np.zeros(self.dim)
        for s in self.specs:
            out += s.matrix_a.T @ s.grad_u(s.matrix_a @ theta)
        return out

    def hess(self, theta) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        for s in self.specs:
            a = s.matrix_a
            out += a.T @ s.hess_u(a @ theta) @ a
        return out

    def values(self, thetas) -> np.ndarray:
        """Vectorised :meth:`value` over the rows of ``thetas``."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        out = np.zeros(thetas.shape[0])
        for s in self.specs:
            zs = thetas if s.is_identity else thetas @ s.matrix_a.T
            for start in range(0, zs.shape[0], 4096):
                out[start:start + 4096] += s.potential_rows(zs[start:start + 4096])
        return out


def newton_minimize(fun, grad, hess, x0, tol: float = 1e-10, max_iter: int = 200):
    """Damped Newton method with Armijo backtracking.

    Stops when ``|grad| <= tol * max(1, |grad(x0)|)`` or when the Newton step
    stops moving ``x`` at machine precision.

    Returns:
        Tuple ``(x, grad_norm, n_iter)``.
    """
    x = np.array(x0, dtype=float)
    g = grad(x)
    scale = max(1.0, float(np.linalg.norm(g)))
    f = fun(x)
    for it in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol * scale:
            return x, gnorm, it
        step = np.linalg.solve(hess(x), g)
        t = 1.0
        slope = float(g @ step)
        while True:
            x_new = x - t * step
            f_new = fun(x_new)
            if f_new <= f - 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if np.linalg.norm(x_new - x) <= 1e-15 * (1.0 + np.linalg.norm(x)):
            x, g = x_new, grad(x_new)
            return x, float(np.linalg.norm(g)), it + 1
        x, f, g = x_new, f_new, grad(x_new)
    return x, float(np.linalg.norm(g)), max_iter


def find_mode(specs, theta0=None, tol: float = 1e-10) -> np.ndarray:
    """Minimiser ``theta*`` of ``sum_i U_i(A_i theta)``."""
    target = NegLogPosterior(specs)
    x0 = np.zeros(target.dim) if theta0 is None else theta0
    x, _, _ = newton_minimize(target.value, target.grad, target.hess, x0, tol)
    return x


def worker_minimizers(specs, tol: float = 1e-10) -> list[np.ndarray]:
    """Minimiser of each ``U_i`` over its own variable ``z_i``."""
    out = []
    for s in specs:
        x, _, _ = newton_minimize(s.potential, s.grad_u, s.hess_u, np.zeros(s.dim_out), tol)
        out.append(x)
    return out
