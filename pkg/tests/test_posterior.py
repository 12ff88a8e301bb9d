import math

import numpy as np
import pytest

from seiird.posterior import Posterior
from seiird.priors import PriorSpec, from_unconstrained, to_unconstrained


def _points(post, n, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        theta = post.priors.sample(rng, 1)[0]
        z = to_unconstrained(theta, post.names)
        if math.isfinite(post.reference_log_density_and_grad(z)[0]):
            out.append(z)
    return out


@pytest.mark.parametrize("model", ["test_aware", "no_tests"])
def test_fused_kernel_matches_reference(sim_data, model):
    post = Posterior(sim_data, model)
    for z in _points(post, 10, 1):
        lp, g = post.log_density_and_grad(z)
        lp_ref, g_ref = post.reference_log_density_and_grad(z)
        assert lp == pytest.approx(lp_ref, rel=1e-10, abs=1e-8)
        assert np.allclose(g, g_ref, rtol=1e-8, atol=1e-8)


@pytest.mark.parametrize("model", ["test_aware", "no_tests"])
def test_gradient_matches_central_differences(sim_data, model):
    post = Posterior(sim_data, model)
    for z in _points(post, 5, 2):
        _, g = post.log_density_and_grad(z)
        for i in range(z.size):
            h = 1e-5
            e = np.zeros_like(z)
            e[i] = h
            fd = (post.log_density(z + e) - post.log_density(z - e)) / (2 * h)
            assert abs(g[i] - fd) <= max(1e-4 * abs(fd), 1e-6), (model, post.names[i], g[i], fd)


def test_log_prob_consistent_with_density(sim_data, truth):
    post = Posterior(sim_data)
    z = to_unconstrained(truth)
    _, logjac = from_unconstrained(z)
    assert post.log_density(z) == pytest.approx(post.log_prob(truth) + logjac, rel=1e-10)


def test_invalid_model_and_prior_mismatch(sim_data):
    with pytest.raises(ValueError):
        Posterior(sim_data, "poisson")
    with pytest.raises(ValueError):
        Posterior(sim_data, "no_tests", priors=PriorSpec.default("test_aware"))


def test_non_finite_point_is_minus_infinity(sim_data):
    post = Posterior(sim_data)
    z = np.full(post.dim, 800.0)
    lp, g = post.log_density_and_grad(z)
    assert lp == -math.inf
