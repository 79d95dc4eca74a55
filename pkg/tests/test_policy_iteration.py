import numpy as np
import pytest

from offpolicy_sgd.engine import ProjectionSet
from offpolicy_sgd.mdp import InvalidModelError, Policy, random_mdp, single_state_mdp, stay_or_swap_mdp
from offpolicy_sgd.policy_iteration import (
    EvaluationDiverged,
    PolicyIterConfig,
    approximate_policy_iteration,
    concentrability,
    error_propagation_bound,
    exact_policy_iteration,
    greedy_improve,
    optimal_oracle,
    perturbed_evaluator,
    policy_values,
    q_values,
)

UNIFORM2 = Policy.uniform(2, 2)


def exact_evaluator(mdp):
    return lambda policy, k: policy_values(mdp, policy)


# -- greedy improvement -------------------------------------------------------


def test_zero_values_pick_best_immediate_reward():
    mdp = random_mdp(5, 3, 0.9, np.random.default_rng(0))
    pol = greedy_improve(mdp, np.zeros(5))
    np.testing.assert_array_equal(pol.greedy_actions(), np.argmax(mdp.expected_reward, axis=1))
    assert pol.is_deterministic()


def test_stay_or_swap_hand_computed():
    mdp = stay_or_swap_mdp(0.9)
    v_hat = np.array([10.0, 0.0])
    # s1: stay 1 + 0.9*10 = 10, swap 1 + 0.9*0 = 1; s2: stay 0 + 0 = 0, swap 0 + 0.9*10 = 9
    np.testing.assert_allclose(q_values(mdp, v_hat), [[10.0, 1.0], [0.0, 9.0]])
    np.testing.assert_array_equal(greedy_improve(mdp, v_hat).greedy_actions(), [0, 1])


def test_ties_go_to_lowest_action():
    mdp = single_state_mdp(n_actions=3)
    np.testing.assert_array_equal(greedy_improve(mdp, np.zeros(1)).probs, [[1.0, 0.0, 0.0]])


# -- exact oracles --------------------------------------------------------------


def test_single_state_optimal_value():
    _, v = optimal_oracle(single_state_mdp(reward=1.0, gamma=0.8))
    np.testing.assert_allclose(v, [5.0])


def test_stay_or_swap_optimal_policy():
    pi, v = optimal_oracle(stay_or_swap_mdp(0.9))
    np.testing.assert_array_equal(pi.greedy_actions(), [0, 1])
    np.testing.assert_allclose(v, [10.0, 9.0])


def test_optimality_residual_on_random_mdps():
    for seed in range(10):
        mdp = random_mdp(5, 3, 0.9, np.random.default_rng(seed))
        pi, v = optimal_oracle(mdp)
        residual = np.abs(q_values(mdp, v).max(axis=1) - v).max()
        assert residual <= 1e-10
        np.testing.assert_allclose(policy_values(mdp, pi), v, atol=1e-9)


def test_exact_policy_iteration_terminates_quickly():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(5, 3, 0.9, rng)
        start = Policy.deterministic(rng.integers(3, size=5), 3)
        seq = exact_policy_iteration(mdp, start)
        pi_star, _ = optimal_oracle(mdp)
        np.testing.assert_array_equal(seq[-1].probs, pi_star.probs)
        assert len(seq) - 1 <= 3 ** 5
        assert len(seq) - 1 <= 4


# -- approximate policy iteration ---------------------------------------------


def test_config_validation():
    with pytest.raises(InvalidModelError):
        PolicyIterConfig(K=1, T_eval=10, gamma=1.0)
    with pytest.raises(InvalidModelError):
        PolicyIterConfig(K=-1, T_eval=10, gamma=0.9)


def test_no_rounds_reports_initial_policy_only():
    mdp = stay_or_swap_mdp(0.9)
    report = approximate_policy_iteration(mdp, UNIFORM2, PolicyIterConfig(K=0, T_eval=10, gamma=0.9))
    assert len(report.rounds) == 1
    assert report.rounds[0].suboptimality == pytest.approx(report.mu_star @ (report.v_star - policy_values(mdp, UNIFORM2)))


def test_exact_evaluation_is_geometric_and_monotone():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(5, 3, 0.9, rng)
        start = Policy.deterministic(rng.integers(3, size=5), 3)
        cfg = PolicyIterConfig(K=6, T_eval=1, gamma=0.9, initial_policy=start)
        report = approximate_policy_iteration(mdp, Policy.uniform(5, 3), cfg, exact_evaluator(mdp))
        subs = [r.suboptimality for r in report.rounds]
        for k, sub in enumerate(subs):
            assert -1e-10 <= sub <= 0.9**k * subs[0] + 1e-10
        values = [report.mu_star @ policy_values(mdp, r.policy) for r in report.rounds]
        assert all(b >= a - 1e-10 for a, b in zip(values, values[1:]))


def test_injected_errors_stay_within_propagation_bound():
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        mdp = random_mdp(5, 3, 0.9, rng)
        for eps in (0.01, 0.3):
            start = Policy.deterministic(rng.integers(3, size=5), 3)
            cfg = PolicyIterConfig(K=8, T_eval=1, gamma=0.9, initial_policy=start)
            report = approximate_policy_iteration(mdp, Policy.uniform(5, 3), cfg, perturbed_evaluator(mdp, [eps] * 8, rng))
            for r in report.rounds[:-1]:
                assert r.eps_hat == pytest.approx(eps)
            bounds = error_propagation_bound(report, concentrability(mdp, report))
            assert all(r.suboptimality <= b + 1e-10 for r, b in zip(report.rounds, bounds))


def test_missing_support_is_a_diagnostic_not_a_crash():
    mdp = stay_or_swap_mdp(0.9)
    b = Policy(np.array([[0.5, 0.5], [1.0, 0.0]]))
    cfg = PolicyIterConfig(K=2, T_eval=2000, gamma=0.9, initial_policy=UNIFORM2)
    report = approximate_policy_iteration(mdp, b, cfg)
    assert report.diagnostics()
    assert any("action 1 in state 1" in line for line in report.diagnostics())
    assert not np.isfinite(report.rounds[0].shift_c)


def test_divergent_evaluation_aborts_with_round():
    mdp = random_mdp(3, 2, 0.9, np.random.default_rng(1))
    cfg = PolicyIterConfig(
        K=2, T_eval=200, gamma=0.9, eval_rule="td0",
        schedule={"variant": "inverse_sqrt", "eta0": 500.0}, projection=ProjectionSet.ball(1e6),
    )
    with pytest.raises(EvaluationDiverged) as err:
        approximate_policy_iteration(mdp, Policy.uniform(3, 2), cfg)
    assert err.value.round_index == 1


def test_report_csv(tmp_path):
    mdp = stay_or_swap_mdp(0.9)
    report = approximate_policy_iteration(mdp, UNIFORM2, PolicyIterConfig(K=2, T_eval=1, gamma=0.9), exact_evaluator(mdp))
    path = tmp_path / "r.csv"
    report.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "k,eps_hat,suboptimality,shift_c"
    assert len(lines) == 4 and lines[-1].split(",")[1] == ""


def test_stay_or_swap_learned_from_offline_data():
    mdp = stay_or_swap_mdp(0.9)
    pi_star, _ = optimal_oracle(mdp)
    hits = 0
    for seed in range(20):
        cfg = PolicyIterConfig(K=5, T_eval=100_000, gamma=0.9, eval_rule="td0", seed=seed)
        report = approximate_policy_iteration(mdp, UNIFORM2, cfg)
        hits += np.array_equal(report.final_policy.probs, pi_star.probs)
    assert hits == 20
