"""Post-hoc chain analysis: autocorrelation, IAT, moments and HPD error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _as_matrix(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("samples must be a T x d matrix")
    return x


def acf(samples, max_lag: int) -> np.ndarray:
    """Per-coordinate sample autocorrelation at lags ``0 .. max_lag - 1``.

    Computed with a zero-padded FFT; lag 0 is exactly 1.

    Raises:
        ValueError: if ``T <= max_lag`` or a coordinate is constant.
    """
    x = _as_matrix(samples)
    n = x.shape[0]
    if max_lag < 1 or n <= max_lag:
        raise ValueError("need 1 <= max_lag < number of samples")
    xc = x - x.mean(axis=0)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, n=size, axis=0)
    cov = np.fft.irfft(f * np.conj(f), n=size, axis=0)[:max_lag]
    var0 = cov[0]
    if np.any(var0 <= 1e-300 * n):
        raise ValueError("constant coordinate: autocorrelation is undefined")
    out = cov / var0
    out[0] = 1.0
    return out


def iat(samples, window_rule: str = "geyer") -> np.ndarray:
    """Integrated autocorrelation time per coordinate.

    Uses Geyer's initial positive sequence: lag pairs ``rho_{2k} + rho_{2k+1}``
    are summed while positive. Constant coordinates get IAT 1.
    """
    if window_rule != "geyer":
        raise ValueError(f"unknown window rule {window_rule!r}")
    x = _as_matrix(samples)
    n, d = x.shape
    out = np.ones(d)
    if n < 4:
        return out
    for j in range(d):
        col = x[:, j]
        if np.ptp(col) == 0:
            continue
        r = acf(col, n - 1)[:, 0]
        n_pairs = (n - 1) // 2
        pairs = r[0:2 * n_pairs:2] + r[1:2 * n_pairs:2]
        neg = np.flatnonzero(pairs <= 0)
        k = neg[0] if neg.size else n_pairs
        out[j] = max(-1.0 + 2.0 * float(np.sum(pairs[:k])), 1e-12)
    return out


def moments_with_se(samples):
    """Mean, covariance and IAT-corrected standard errors of the mean.

    Returns:
        ``(mean, cov, se)`` with ``se_j = sqrt(cov_jj * IAT_j / T)``.
    """
    x = _as_matrix(samples)
    n = x.shape[0]
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    cov = 0.5 * (cov + cov.T)
    se = np.sqrt(np.diag(cov) * iat(x) / n)
    return mean, cov, se


def covariance_se(samples) -> np.ndarray:
    """Standard errors of each sample covariance entry.

    Treats ``(x_j - mean_j)(x_k - mean_k)`` as a scalar chain and applies the
    IAT-corrected standard error of its mean.
    """
    x = _as_matrix(samples)
    n, d = x.shape
    xc = x - x.mean(axis=0)
    out = np.zeros((d, d))
    for j in range(d):
        for k in range(j, d):
            prod = xc[:, j] * xc[:, k]
            var = float(np.var(prod, ddof=1))
            tau = float(iat(prod)[0]) if var > 0 else 1.0
            out[j, k] = out[k, j] = np.sqrt(var * tau / n)
    return out


@dataclass(frozen=True)
class HpdSummary:
    """HPD threshold estimate and its relative error against a reference."""

    alpha: float
    eta_alpha: float
    rel_error: float


def hpd_threshold(neg_log_values, alpha: float) -> float:
    """Empirical ``(1 - alpha)``-quantile (type-7) of ``-log pi`` values."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return float(np.quantile(np.asarray(neg_log_values, dtype=float), 1.0 - alpha))


def hpd_error(samples, neg_log_post, alpha: float, eta_true: float) -> HpdSummary:
    """Relative error of the HPD threshold estimated from ``samples``.

    Args:
        samples: ``T x d`` chain output.
        neg_log_post: Callable or object with ``values(thetas)`` giving
            ``-log pi`` up to a constant shared with ``eta_true``.
        alpha: HPD mass complement, in ``(0, 1)``.
        eta_true: Reference threshold, typically from a MALA run.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    x = _as_matrix(samples)
    if hasattr(neg_log_post, "values"):
        vals = neg_log_post.values(x)
    else:
        vals = np.array([neg_log_post(row) for row in x])
    eta = hpd_threshold(vals, alpha)
    return HpdSummary(alpha, eta, abs(eta - eta_true) / abs(eta_true))


def hpd_error_trace(samples, neg_log_post, alpha: float, eta_true: float, n_points: int = 20):
    """Relative HPD error against the number of kept samples.

    Returns:
        ``(counts, rel_errors)`` on a grid of ``n_points`` prefix lengths.
    """
    x = _as_matrix(samples)
    vals = neg_log_post.values(x) if hasattr(neg_log_post, "values") else \
        np.array([neg_log_post(row) for row in x])
    counts = np.unique(np.linspace(max(2, x.shape[0] // n_points), x.shape[0], n_points).astype(int))
    errs = np.array([abs(hpd_threshold(vals[:c], alpha) - eta_true) / abs(eta_true) for c in counts])
    return counts, errs


def summarize(samples) -> dict:
    """Flat dictionary of moments, standard errors and IATs for reporting."""
    mean, cov, se = moments_with_se(samples)
    tau = iat(samples)
    out = {}
    for j in range(mean.shape[0]):
        out[f"mean_{j + 1}"] = float(mean[j])
        out[f"se_{j + 1}"] = float(se[j])
        out[f"iat_{j + 1}"] = float(tau[j])
    for j in range(mean.shape[0]):
        for k in range(j, mean.shape[0]):
            out[f"cov_{j + 1}_{k + 1}"] = float(cov[j, k])
    return out
