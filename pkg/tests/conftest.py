import numpy as np
import pytest

from r2d2prior.families import ModelFamily


@pytest.hookimpl(tryfirst=True, hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, "rep_" + rep.when, rep)


def closed_form_families():
    """The six families with an exact R-squared map, at default thetas."""
    return {
        "locscale": ModelFamily.location_scale(1.0),
        "poisson": ModelFamily.poisson(),
        "offset": ModelFamily.poisson_offset(0.5),
        "negbin": ModelFamily.neg_binomial(2.0),
        "zip": ModelFamily.zero_inflated_poisson(0.3),
        "weibull": ModelFamily.weibull(1.5),
    }


@pytest.fixture(scope="session")
def exact_families():
    return closed_form_families()


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)
