import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from dglmc.estimators import DGLMCGaussianMean, DGLMCLogisticRegression


def _classification(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    logits = x @ np.array([2.0, -1.0, 0.5]) + 0.3
    y = np.where(rng.random(n) < 1 / (1 + np.exp(-logits)), "yes", "no")
    return x, y


def test_params_and_clone():
    est = DGLMCLogisticRegression(n_shards=3, n_iter=100, seed=4)
    params = est.get_params()
    assert params["n_shards"] == 3 and params["seed"] == 4
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(prior_prec=2.0)
    assert est.prior_prec == 2.0


def test_logistic_fit_predict():
    x, y = _classification()
    est = DGLMCLogisticRegression(n_iter=1500, burn_in=300).fit(x, y)
    proba = est.predict_proba(x)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-12)
    assert set(est.predict(x)) <= {"no", "yes"}
    assert est.score(x, y) > 0.75
    assert est.coef_.shape == (3,) and np.sign(est.coef_[0]) == 1
    assert est.coef_samples_.shape == (1200, 4)


def test_logistic_deterministic_under_seed():
    x, y = _classification(n=100)
    a = DGLMCLogisticRegression(n_iter=200, burn_in=50, seed=1).fit(x, y)
    b = DGLMCLogisticRegression(n_iter=200, burn_in=50, seed=1).fit(x, y)
    np.testing.assert_array_equal(a.coef_samples_, b.coef_samples_)


def test_logistic_errors():
    x, y = _classification(n=60)
    est = DGLMCLogisticRegression(n_iter=50, burn_in=10)
    with pytest.raises(NotFittedError):
        est.predict(x)
    with pytest.raises(ValueError, match="binary"):
        est.fit(x, np.arange(60) % 3)
    est.fit(x, y)
    with pytest.raises(ValueError, match="features"):
        est.predict(x[:, :2])


def test_logistic_in_pipeline():
    x, y = _classification(n=200)
    pipe = make_pipeline(StandardScaler(), DGLMCLogisticRegression(n_iter=400, burn_in=100))
    assert pipe.fit(x, y).score(x, y) > 0.7


def test_gaussian_mean_matches_exact_posterior():
    rng = np.random.default_rng(2)
    x = rng.normal(loc=[1.0, -0.5], size=(800, 2))
    est = DGLMCGaussianMean(n_iter=6000, burn_in=500).fit(x)
    exact = est.exact_posterior_
    se = np.sqrt(np.diag(exact.cov))
    assert np.all(np.abs(est.posterior_mean_ - exact.mean) < 0.5 * se)
    np.testing.assert_allclose(est.transform(x).mean(axis=0), x.mean(axis=0) - est.posterior_mean_)
    assert est.posterior_cov_.shape == (2, 2)


def test_gaussian_mean_fit_transform_and_errors():
    x = np.random.default_rng(3).normal(size=(50, 1))
    est = DGLMCGaussianMean(n_iter=300, burn_in=50)
    out = est.fit_transform(x)
    assert out.shape == x.shape
    with pytest.raises(ValueError):
        est.transform(np.ones((3, 2)))
    with pytest.raises(NotFittedError):
        DGLMCGaussianMean().transform(x)
