"""Scikit-learn style wrappers around the distributed sampler."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .baselines import exact_gaussian_posterior, GaussianLaw
from .engine import ClusterProfile, RunConfig, run_dglmc
from .model import gaussian_model, logistic_model
from .tuning import guideline_hyperparams


def _run(specs, c_gamma, n_local, n_iter, burn_in, thin, seed):
    hyper = guideline_hyperparams(specs, c_gamma, ClusterProfile.homogeneous(len(specs)), n_local)
    return run_dglmc(specs, hyper, RunConfig(n_iter, burn_in, thin, seed))


class DGLMCLogisticRegression(ClassifierMixin, BaseEstimator):
    """Bayesian logistic regression sampled with the distributed Gibbs scheme.

    The rows of ``X`` are split into ``n_shards`` contiguous blocks, one per
    simulated worker. Predictions average the logistic link over the kept
    posterior samples.

    Parameters
    ----------
    n_shards : int
        Number of simulated workers.
    prior_prec : float
        Precision of the isotropic Gaussian prior on the coefficients.
    fit_intercept : bool
        Append a constant feature.
    c_gamma : float
        Step fraction in ``[0.1, 0.5]``.
    n_local : int or None
        Local Langevin steps per worker and iteration; ``None`` uses the
        guideline value.
    n_iter, burn_in, thin, seed : int
        Chain length, discarded prefix, thinning and random seed.
    """

    def __init__(self, n_shards=4, prior_prec=1.0, fit_intercept=True, c_gamma=0.25,
                 n_local=None, n_iter=2000, burn_in=500, thin=1, seed=0):
        self.n_shards = n_shards
        self.prior_prec = prior_prec
        self.fit_intercept = fit_intercept
        self.c_gamma = c_gamma
        self.n_local = n_local
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.thin = thin
        self.seed = seed

    def _design(self, X):
        if self.fit_intercept:
            return np.column_stack([X, np.ones(X.shape[0])])
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        if self.classes_.shape[0] != 2:
            raise ValueError(f"binary labels required, got {self.classes_.shape[0]} classes")
        labels = (y == self.classes_[1]).astype(float)
        specs = logistic_model(self._design(X), labels, self.prior_prec,
                               min(self.n_shards, X.shape[0]))
        report = _run(specs, self.c_gamma, self.n_local, self.n_iter, self.burn_in, self.thin,
                      self.seed)
        self.coef_samples_ = report.theta_samples
        mean = report.theta_samples.mean(axis=0)
        if self.fit_intercept:
            self.coef_, self.intercept_ = mean[:-1], float(mean[-1])
        else:
            self.coef_, self.intercept_ = mean, 0.0
        self.hyper_ = report.hyper
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "coef_samples_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        logits = self._design(X) @ self.coef_samples_.T
        p1 = np.mean(1.0 / (1.0 + np.exp(-logits)), axis=1)
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[(proba[:, 1] > 0.5).astype(int)]


class DGLMCGaussianMean(TransformerMixin, BaseEstimator):
    """Posterior of a Gaussian mean under a conjugate prior, sampled distributedly.

    ``fit`` samples ``theta`` given rows ``y_j ~ N(theta, noise_var I)``;
    ``transform`` centres new rows at the posterior mean.

    Parameters
    ----------
    n_shards : int
        Number of simulated workers.
    prior_var, noise_var : float
        Isotropic prior and observation variances.
    c_gamma, n_local, n_iter, burn_in, thin, seed
        As in :class:`DGLMCLogisticRegression`.
    """

    def __init__(self, n_shards=4, prior_var=10.0, noise_var=1.0, c_gamma=0.25, n_local=None,
                 n_iter=5000, burn_in=500, thin=1, seed=0):
        self.n_shards = n_shards
        self.prior_var = prior_var
        self.noise_var = noise_var
        self.c_gamma = c_gamma
        self.n_local = n_local
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.thin = thin
        self.seed = seed

    def fit(self, X, y=None):
        X = check_array(X)
        d = X.shape[1]
        b = min(self.n_shards, X.shape[0])
        prior = GaussianLaw(np.zeros(d), self.prior_var * np.eye(d))
        cov_like = self.noise_var * np.eye(d)
        specs = gaussian_model(prior.mean, prior.cov, cov_like, np.array_split(X, b))
        report = _run(specs, self.c_gamma, self.n_local, self.n_iter, self.burn_in, self.thin,
                      self.seed)
        self.samples_ = report.theta_samples
        self.posterior_mean_ = self.samples_.mean(axis=0)
        self.posterior_cov_ = np.atleast_2d(np.cov(self.samples_, rowvar=False))
        self.exact_posterior_ = exact_gaussian_posterior(prior, cov_like, X)
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "posterior_mean_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X - self.posterior_mean_
