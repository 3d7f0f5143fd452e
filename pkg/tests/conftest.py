import numpy as np
import pytest

from mistr.data_model import OutcomeTransform, StudyConfig, SurvivalDataset


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240 * 7)


@pytest.fixture(scope="session")
def small_censored_dataset():
    """Exponential events with uniform censoring, five noise covariates."""
    r = np.random.default_rng(1234)
    n = 400
    x = r.random((n, 5))
    w = (r.random(n) < 0.5).astype(float)
    tilde = r.exponential(2.0, n)
    censor = r.uniform(0.0, 4.0, n)
    return SurvivalDataset(
        covariates=x, treatment=w,
        time=np.minimum(tilde, censor),
        event=(tilde <= censor).astype(float),
    )


@pytest.fixture(scope="session")
def complete_dataset():
    """Fully observed outcomes with a known linear effect 2*x1."""
    r = np.random.default_rng(77)
    n = 600
    x = r.random((n, 5))
    w = (r.random(n) < 0.5).astype(float)
    y = np.clip(x[:, 1] + 2.0 * x[:, 0] * w + r.normal(0, 0.3, n), 0.0, None)
    return SurvivalDataset(covariates=x, treatment=w, time=y, event=np.ones(n))


@pytest.fixture(scope="session")
def rmst_g():
    return OutcomeTransform(kind=OutcomeTransform.RMST, horizon=100.0)
