import numpy as np
import pytest

from offpolicy_sgd.analysis import fit_rate, fit_records, spectrum_checks, value_error, value_error_check
from offpolicy_sgd.engine import RunRecord, record_times
from offpolicy_sgd.features import build_loss_model, orthonormal_features, tabular_features
from offpolicy_sgd.mdp import Policy, exact_values, random_mdp, random_policy, two_state_test_mdp

T = np.array(record_times(100_000), dtype=float)


def test_exact_power_law():
    assert fit_rate(T, 1.0 / T).slope == pytest.approx(-1.0, abs=0.01)


def test_log_factor_flattens_the_exponent():
    slope = fit_rate(T, np.log(T) / np.sqrt(T)).slope
    # evaluate the local exponent of log t / sqrt t directly: d log f / d log t = 1/log t - 1/2
    local = 1 / np.log(np.array([1e3, 1e5])) - 0.5
    assert local[0] <= slope <= local[1] or local[1] <= slope <= local[0]
    assert -0.5 <= slope <= -0.35


def test_constant_metric():
    assert fit_rate(T, np.full_like(T, 3.0)).slope == pytest.approx(0.0, abs=1e-12)


def test_fit_rejects_bad_windows_and_values():
    with pytest.raises(ValueError, match="at least 5"):
        fit_rate([1e3, 2e3, 3e3], [1, 2, 3])
    vals = 1.0 / T
    vals[np.flatnonzero(T >= 2000)[0]] = 0.0
    with pytest.raises(ValueError, match="positive"):
        fit_rate(T, vals)


def test_fit_records_averages_before_the_log():
    grid = [int(t) for t in T]
    a = [RunRecord(t, 1.0, loss_gap=1.0 / t) for t in grid]
    b = [RunRecord(t, 1.0, loss_gap=3.0 / t) for t in grid]
    fit = fit_records([a, b], "loss_gap")
    assert fit.slope == pytest.approx(-1.0, abs=1e-9)
    assert fit.intercept == pytest.approx(np.log(2.0), abs=1e-9)
    assert fit.n_seeds == 2


def test_value_error_zero_at_minimizer():
    rng = np.random.default_rng(0)
    for gamma, fm in ((0.9, tabular_features(4, 0.9)), (1.0, orthonormal_features(4))):
        mdp = random_mdp(4, 2, gamma, rng)
        pi, b = random_policy(4, 2, rng), random_policy(4, 2, rng)
        model = build_loss_model(mdp, pi, b, fm)
        assert value_error(model, model.theta_star) <= 1e-20


def test_value_error_two_state_by_hand():
    mdp = two_state_test_mdp(1.0)
    u = Policy.uniform(2, 2)
    model = build_loss_model(mdp, u, u, orthonormal_features(2))
    exact = exact_values(mdp, u)
    theta = model.theta_star + np.array([0.1, 0.2])
    # orthonormal coordinate moves V by 0.1*(1,-1)/sqrt2 (already centred); rbar moves by 0.2
    expected = 0.5 * 2 * (0.1 / np.sqrt(2)) ** 2 + 0.2**2
    assert value_error(model, theta) == pytest.approx(expected)
    assert exact.average_reward == pytest.approx(0.5)


def test_corrected_factor_dominates():
    rng = np.random.default_rng(1)
    mdp = random_mdp(4, 2, 0.9, rng)
    pi, b = random_policy(4, 2, rng), random_policy(4, 2, rng)
    model = build_loss_model(mdp, pi, b, tabular_features(4, 0.9))
    theta = rng.normal(size=4)
    stated = value_error_check(model, theta)
    corrected = value_error_check(model, theta, corrected=True)
    assert corrected.factor >= stated.factor
    assert corrected.slack >= 0


def test_spectrum_check_names():
    u = Policy.uniform(2, 2)
    model = build_loss_model(two_state_test_mdp(0.5), u, u, tabular_features(2, 0.5))
    checks = {c.name: c for c in spectrum_checks(model, "tabular")}
    assert set(checks) == {"hessian", "d_matrix", "td0_jacobian"}
    assert checks["hessian"].bound == pytest.approx(0.125)
    with pytest.raises(ValueError):
        spectrum_checks(model, "radial")
