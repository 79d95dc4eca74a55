import numpy as np
import pytest

from offpolicy_sgd.analysis import fit_rate
from offpolicy_sgd.engine import record_times
from offpolicy_sgd.estimation import EmpiricalModel, ErrorTrace, exact_moments
from offpolicy_sgd.features import tabular_features
from offpolicy_sgd.mdp import (
    InvalidModelError,
    Policy,
    random_mdp,
    random_policy,
    stationary_distribution,
    transition_kernel,
    two_state_test_mdp,
)
from offpolicy_sgd.trajectory import SamplerConfig, make_rng, sample_trajectory


def empty_model(n_states=2, n_actions=2, rewards=(0.0, 1.0)):
    support = np.ones((n_states, n_actions, len(rewards)), dtype=bool)
    return EmpiricalModel(n_states, n_actions, rewards, support)


def test_single_update_counts():
    m = empty_model().update((0, 0, 1.0, 1))
    assert m.count_sa[0, 0] == 1 and m.count_sas[0, 0, 1] == 1 and m.count_s[0] == 1
    assert m.count_sar[0, 0, 1] == 1 and m.t == 1


def test_identical_updates_double_counts():
    once = empty_model().update((1, 1, 0.0, 0))
    twice = empty_model().update((1, 1, 0.0, 0)).update((1, 1, 0.0, 0))
    np.testing.assert_array_equal(twice.count_sas, 2 * once.count_sas)
    np.testing.assert_array_equal(twice.count_sar, 2 * once.count_sar)


def test_bookkeeping_identity_over_a_stream():
    mdp = random_mdp(4, 3, 0.9, np.random.default_rng(0))
    m = EmpiricalModel.for_mdp(mdp)
    m.update_all(sample_trajectory(mdp, Policy.uniform(4, 3), SamplerConfig(100, seed=1)))
    assert m.check_consistency()
    np.testing.assert_array_equal(m.count_sa, m.count_sas.sum(axis=-1))


def test_reward_outside_support_rejected():
    support = np.zeros((1, 1, 2), dtype=bool)
    support[0, 0, 0] = True
    m = EmpiricalModel(1, 1, (0.0, 1.0), support)
    with pytest.raises(InvalidModelError, match="support"):
        m.update((0, 0, 1.0, 0))
    with pytest.raises(InvalidModelError):
        m.update((0, 0, 0.5, 0))


def test_transition_frequencies():
    m = empty_model()
    for sn in (0, 0, 1):
        m.update((0, 0, 1.0, sn))
    target = Policy(np.array([[1.0, 0.0], [0.5, 0.5]]))
    np.testing.assert_allclose(m.estimate_transition(target, 0), [2 / 3, 1 / 3])


def test_unvisited_pair_falls_back_to_uniform():
    m = empty_model(n_states=4)
    np.testing.assert_allclose(m.estimate_transition(Policy.uniform(4, 2), 2), [0.25] * 4)
    # fallback reward is the mean of the declared support
    assert m.estimate_reward(Policy.uniform(4, 2), 2) == pytest.approx(0.5)


def test_moments_single_observation_and_plug_in():
    m = empty_model(n_states=3)
    m.update((0, 0, 1.0, 0)).update((0, 0, 1.0, 0)).update((0, 0, 1.0, 1))
    target = Policy(np.array([[1.0, 0.0]] * 3))
    xi, phi_next = m.estimate_moments(target, tabular_features(3, 0.9).phi, 0)
    assert xi == 1.0
    np.testing.assert_allclose(phi_next, [2 / 3, 1 / 3, 0.0])


def test_injected_expected_counts_reproduce_the_model():
    rng = np.random.default_rng(2)
    mdp = random_mdp(5, 3, 0.9, rng)
    target, behavior = random_policy(5, 3, rng), random_policy(5, 3, rng)
    mu = stationary_distribution(transition_kernel(mdp, behavior))
    weights = mu[:, None] * behavior.probs * 1000.0
    m = EmpiricalModel.for_mdp(mdp).load_expected_counts(mdp, weights)
    phi = np.eye(5)
    xi, phi_next = exact_moments(mdp, target, phi)
    for s in range(5):
        x, p = m.estimate_moments(target, phi, s)
        assert x == pytest.approx(xi[s], abs=1e-12)
        np.testing.assert_allclose(p, phi_next[s], atol=1e-12)
        assert m.estimate_invariant(s) == pytest.approx(mu[s], abs=1e-12)
    trace = ErrorTrace(mdp, target, behavior)
    assert max(trace.error(m, s) for s in range(5)) <= 1e-10


def test_invariant_frequencies():
    m = empty_model()
    for s in (0, 0, 1):
        m.update((s, 0, 0.0, 0))
    assert m.estimate_invariant(0) == pytest.approx(2 / 3)
    single = empty_model().update((1, 0, 0.0, 0))
    assert single.estimate_invariant(1) == 1.0


def test_occupancy_clamp():
    m = empty_model(n_states=2)
    m.update((0, 0, 0.0, 0))
    assert m.clamped_invariant(1) == pytest.approx(1 / (2 * 1 * 2))
    assert m.clamped_invariant(0) == 1.0
    with pytest.raises(ValueError):
        empty_model().estimate_invariant(0)


def test_long_stream_estimates():
    mdp, b = two_state_test_mdp(), Policy.uniform(2, 2)
    m = EmpiricalModel.for_mdp(mdp).update_all(sample_trajectory(mdp, b, SamplerConfig(100_000, seed=0)))
    kernel = transition_kernel(mdp, b)
    err = max(np.abs(m.estimate_transition(b, s) - kernel[s]).max() for s in range(2))
    assert err <= 0.02
    assert abs(m.estimate_invariant(0) - 0.5) <= 0.01


def test_estimation_error_decays_like_inverse_t():
    mdp, b = two_state_test_mdp(), Policy.uniform(2, 2)
    horizon, seeds = 100_000, 20
    times = record_times(horizon)
    total = np.zeros(len(times))
    for seed in range(seeds):
        data = sample_trajectory(mdp, b, SamplerConfig(horizon, seed=seed), make_rng(seed))
        m = EmpiricalModel.for_mdp(mdp)
        trace = ErrorTrace(mdp, b, b)
        k = 0
        for t, z in enumerate(data, start=1):
            m.update(z)
            if t == times[k]:
                total[k] += trace.error(m, z.s) ** 2
                k = min(k + 1, len(times) - 1)
    fit = fit_rate(times, total / seeds, n_seeds=seeds)
    assert fit.slope <= -0.8
