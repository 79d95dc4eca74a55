"""Named invariant checks, run by ``offpolicy-sgd verify``.

Checks that compare against a published inequality "as stated" are kept
even where the inequality is known not to hold in general; a companion
check states the version whose premise is actually met.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .analysis import spectrum_checks, value_error, value_error_factor
from .engine import ProjectionSet, StepSchedule, run, step_size
from .estimation import EmpiricalModel
from .features import build_loss_model, complement_basis, contraction_constant, loss_and_grad, make_features, min_sym_eig
from .mdp import (
    Mdp,
    Policy,
    bellman_residual,
    exact_values,
    mixing_time,
    random_mdp,
    random_policy,
    stationary_distribution,
    transition_kernel,
)
from .policy_iteration import (
    PolicyIterConfig,
    approximate_policy_iteration,
    concentrability,
    error_propagation_bound,
    perturbed_evaluator,
)
from .tabular import sparse_tabular_run
from .trajectory import SamplerConfig, sample_trajectory
from .updates import KINDS, UpdateRule, direction, direction_bounds, mean_direction, problem_scale

NOTES = (
    "rate constants: only exponents are checked; the sample-complexity constants of the "
    "policy-learning bound depend on unstated concentrability constants and are not reproduced. "
    "The gap between the inverse-sqrt and contraction-schedule exponents is the only evidence of "
    "the eps^-4 versus eps^-2 regimes.",
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    explanation: str = ""


KNOWN_GAPS = {
    "td_matrix_bound_tabular_as_stated": (
        "for one-hot features sym(I - gamma P) has smallest eigenvalue 1 - gamma lambda_max(sym P), and "
        "lambda_max(sym P) > 1 unless P is doubly stochastic; the companion check restricts to such kernels"
    ),
    "td_matrix_bound_orthonormal_as_stated": (
        "the gap is measured in the stationary-weighted norm while D acts in the Euclidean one, so the bound "
        "can fail when the target's stationary law is far from uniform; the companion check uses "
        "1 - ||U^T P U||_2, which is exact geometry for these features"
    ),
    "value_error_bound_as_stated": (
        "for gamma < 1 the constant component of the value error contracts only at rate 1 - gamma, not "
        "1 - gamma (1 - gap); the companion check uses (1 - gamma)^2, which follows from ||P f|| <= ||f|| "
        "in the stationary norm"
    ),
}


def _cases(gamma: float, count: int, seed: int, n_states: int = 5, n_actions: int = 3):
    for m in range(count):
        rng = np.random.default_rng([seed, m])
        mdp = random_mdp(n_states, n_actions, gamma, rng)
        yield rng, mdp, random_policy(n_states, n_actions, rng), random_policy(n_states, n_actions, rng)


def _model(mdp: Mdp, target: Policy, behavior: Policy, kind: str):
    return build_loss_model(mdp, target, behavior, make_features(kind, mdp.n_states, mdp.gamma))


def check_stationary() -> CheckResult:
    worst = 0.0
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = rng.dirichlet(np.ones(5), size=5)
        mu = stationary_distribution(p)
        worst = max(worst, np.abs(mu @ p - mu).max())
    return CheckResult("stationary_distribution", worst <= 1e-10, f"max |mu P - mu| = {worst:.2e} on 50 kernels")


def check_mixing_certificate() -> CheckResult:
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(30):
        p = rng.dirichlet(np.full(5, 0.3), size=5)
        mu = stationary_distribution(p)
        tau = mixing_time(p, mu)
        tv = lambda k: 0.5 * np.abs(np.linalg.matrix_power(p, k) - mu).sum(axis=1).max()
        bad += not (tv(tau) <= 0.25 and (tau == 1 or tv(tau - 1) > 0.25))
    return CheckResult("mixing_time_certificate", bad == 0, f"{bad} of 30 chains violate tau-1 fails / tau passes")


def check_bellman_oracles() -> CheckResult:
    worst = 0.0
    for gamma in (0.5, 0.9, 1.0):
        for _, mdp, pi, _ in _cases(gamma, 20, 3):
            v, rbar = exact_values(mdp, pi).unified()
            worst = max(worst, np.abs(bellman_residual(mdp, pi, v, rbar)).max())
    return CheckResult("bellman_residual_of_exact_values", worst <= 1e-10, f"max residual {worst:.2e}")


def check_minimizer_roundtrip() -> CheckResult:
    worst_res, worst_loss = 0.0, 0.0
    for gamma, kind in ((0.5, "tabular"), (0.9, "tabular"), (1.0, "tabular"), (1.0, "orthonormal")):
        for _, mdp, pi, b in _cases(gamma, 10, 4):
            model = _model(mdp, pi, b, kind)
            fm = model.features
            resid = bellman_residual(mdp, pi, fm.values(model.theta_star), fm.average_reward(model.theta_star) if gamma == 1 else 0.0)
            worst_res = max(worst_res, np.abs(resid).max())
            v, rbar = exact_values(mdp, pi).unified()
            theta, *_ = np.linalg.lstsq(np.vstack([fm.phi, fm.zeta]), np.append(v, rbar), rcond=None)
            worst_loss = max(worst_loss, model.loss(theta))
    ok = worst_res <= 1e-9 and worst_loss <= 1e-18
    return CheckResult("minimizer_solves_bellman", ok, f"residual at theta* {worst_res:.2e}; loss at exact values {worst_loss:.2e}")


def check_gradient_identity() -> CheckResult:
    worst = 0.0
    for gamma in (0.5, 0.9):
        for rng, mdp, pi, b in _cases(gamma, 20, 5):
            model = _model(mdp, pi, b, "tabular")
            for kind in ("td_sgd", "direct_sgd"):
                rule = UpdateRule(kind, pi, b, model.features, gamma)
                for _ in range(3 if kind == "direct_sgd" else 10):
                    theta = rng.normal(scale=3.0, size=model.features.dim)
                    _, grad = loss_and_grad(model, theta)
                    worst = max(worst, np.abs(mean_direction(rule, theta, model) - grad).max())
    return CheckResult("mean_gradient_direction_equals_loss_gradient", worst <= 1e-12, f"max deviation {worst:.2e}")


def check_contraction(build=None) -> CheckResult:
    """Mean directions against the contraction constant from the loss model."""
    build = build or build_loss_model
    worst_slack, worst_form = np.inf, 0.0
    cases = [(0.5, "tabular"), (0.9, "tabular"), (1.0, "orthonormal")]
    for gamma, kind in cases:
        for rng, mdp, pi, b in _cases(gamma, 3, 6):
            fm = make_features(kind, mdp.n_states, gamma)
            model = build(mdp, pi, b, fm)
            for rule_kind in KINDS:
                rule = UpdateRule(rule_kind, pi, b, fm, gamma)
                c = contraction_constant(model, rule_kind)
                quad = model.td0_jacobian if rule_kind == "td0" else model.hessian
                for _ in range(20):
                    d = rng.normal(size=fm.dim)
                    theta = model.theta_star + d
                    g = mean_direction(rule, theta, model)
                    worst_slack = min(worst_slack, d @ g - c * (d @ d))
                    worst_form = max(worst_form, abs(d @ g - d @ quad @ d) / max(1.0, d @ d))
    ok = worst_slack >= -1e-10 and worst_form <= 1e-9
    return CheckResult(
        "mean_direction_contraction",
        ok,
        f"min <d, g> - c|d|^2 = {worst_slack:.2e}; quadratic-form mismatch {worst_form:.2e}",
    )


def _spectrum(
    kind: str, gammas, name: str, which: tuple[str, ...], doubly_stochastic: bool = False, count: int = 20, seed: int = 7
) -> CheckResult:
    worst = {w: np.inf for w in which}
    fails = 0
    total = 0
    for gamma in gammas:
        for rng, mdp, pi, b in _cases(gamma, count, seed):
            if doubly_stochastic:
                # a uniform target keeps the mixed kernel doubly stochastic
                mdp, pi = _doubly_stochastic_variant(mdp, rng), Policy.uniform(mdp.n_states, mdp.n_actions)
            model = _model(mdp, pi, b, kind)
            for chk in spectrum_checks(model, kind):
                if chk.name in which:
                    worst[chk.name] = min(worst[chk.name], chk.slack)
                    fails += chk.slack < -1e-10
                    total += 1
    detail = ", ".join(f"{k} worst slack {v:.3g}" for k, v in worst.items()) + f"; {fails}/{total} below bound"
    return CheckResult(name, fails == 0, detail)


def check_orthonormal_euclidean_bound() -> CheckResult:
    """sym(D) >= 1 - ||U^T P U||_2 for orthonormal features, U the complement basis."""
    u = complement_basis(5)
    worst, fails = np.inf, 0
    for _, mdp, pi, b in _cases(1.0, 200, 8):
        model = _model(mdp, pi, b, "orthonormal")
        bound = 1.0 - float(np.linalg.norm(u.T @ transition_kernel(mdp, pi) @ u, 2))
        slack = min_sym_eig(model.d_matrix) - bound
        worst = min(worst, slack)
        fails += slack < -1e-10
    return CheckResult("td_matrix_bound_orthonormal_euclidean", fails == 0, f"worst slack {worst:.3g}; {fails}/200 below bound")


def _doubly_stochastic_variant(mdp: Mdp, rng) -> Mdp:
    """Same rewards, transitions replaced by random doubly stochastic matrices (mixtures of permutations)."""
    n, a = mdp.n_states, mdp.n_actions
    p = np.zeros_like(mdp.transition)
    for s_a in np.ndindex(a):
        weights = rng.dirichlet(np.ones(4))
        mat = sum(w * np.eye(n)[rng.permutation(n)] for w in weights)
        p[:, s_a[0], :] = mat
    return Mdp(p, mdp.reward_values, mdp.reward_probs, mdp.gamma)


def check_step_bracket() -> CheckResult:
    bad = 0
    for c in (0.1, 1.0, 10.0):
        for eta1 in (1.0 / c, 2.0 / c):
            sched = StepSchedule.contraction(c, eta1)
            for t, eta in zip(range(1, 1_000_001), sched):
                if not (1.0 / (c * t) <= eta <= 2.0 / (c * t)):
                    bad += 1
    return CheckResult("step_size_bracket", bad == 0, f"{bad} violations of 1/(ct) <= eta_t <= 2/(ct), t <= 1e6")


def check_step_telescoping() -> CheckResult:
    rng = np.random.default_rng(8)
    worst = 0.0
    for c in (0.1, 1.0, 10.0):
        sched = StepSchedule.contraction(c)
        etas = np.array([step_size(sched, t) for t in range(1, 20_001)])
        csum = np.concatenate([[0.0], np.cumsum(etas)])
        for _ in range(50):
            t, T = sorted(rng.integers(1, 20_000, size=2))
            lhs = np.exp(-0.5 * c * (csum[T - 1] - csum[t - 1])) * etas[t - 1]
            worst = max(worst, abs(lhs - etas[T - 1]) / etas[T - 1])
    return CheckResult("step_size_telescoping", worst <= 1e-9, f"max relative error {worst:.2e}")


def check_direction_bounds() -> CheckResult:
    bad = 0
    for gamma in (0.5, 0.9):
        for rng, mdp, pi, b in _cases(gamma, 3, 9):
            model = _model(mdp, pi, b, "tabular")
            fm = model.features
            radius = 2.0 * float(np.linalg.norm(model.theta_star)) + 1.0
            c_shift = float(np.max(pi.probs / (model.mu_b[:, None] * b.probs)))
            scale = problem_scale(mdp, fm)
            for kind in KINDS:
                bounds = direction_bounds(kind, scale, radius, c_shift, fm.has_average)
                rule = UpdateRule(kind, pi, b, fm, gamma)
                for _ in range(300):
                    t1, t2 = (_in_ball(rng, fm.dim, radius) for _ in range(2))
                    s, a = rng.integers(mdp.n_states), rng.integers(mdp.n_actions)
                    z = (int(s), int(a), float(rng.choice(mdp.reward_values[mdp.reward_probs[s, a] > 0])), int(rng.integers(mdp.n_states)))
                    g1, g2 = direction(rule, t1, z, model), direction(rule, t2, z, model)
                    bad += np.linalg.norm(g1) > bounds.magnitude * (1 + 1e-12)
                    bad += np.linalg.norm(g1 - g2) > bounds.lipschitz * np.linalg.norm(t1 - t2) * (1 + 1e-12) + 1e-12
    return CheckResult("direction_norm_and_lipschitz_bounds", bad == 0, f"{bad} violations")


def _in_ball(rng, dim: int, radius: float) -> np.ndarray:
    x = rng.normal(size=dim)
    return x * (radius * rng.random() ** (1.0 / dim) / np.linalg.norm(x))


def check_sparse_equivalence() -> CheckResult:
    worst = 0.0
    for gamma in (0.9, 1.0):
        for _, mdp, pi, b in _cases(gamma, 1, 10):
            fm = make_features("tabular", mdp.n_states, gamma)
            data = sample_trajectory(mdp, b, SamplerConfig(3000, seed=11))
            pset = ProjectionSet.box(5.0)
            for kind in KINDS:
                rule = UpdateRule(kind, pi, b, fm, gamma, "empirical")
                res = run(rule, data, StepSchedule.contraction(0.5), pset, np.zeros(fm.dim), estimator=EmpiricalModel.for_mdp(mdp))
                last, mean = sparse_tabular_run(
                    kind, data, pi, b, gamma, StepSchedule.contraction(0.5), pset, np.zeros(fm.dim), EmpiricalModel.for_mdp(mdp)
                )
                worst = max(worst, np.abs(last - res.theta).max(), np.abs(mean - res.theta_bar).max())
    return CheckResult("tabular_sparse_equivalence", worst <= 1e-12, f"max deviation {worst:.2e}")


def _value_error_check(name: str, corrected: bool, gammas) -> CheckResult:
    fails, total = 0, 0
    for gamma in gammas:
        kind = "tabular" if gamma < 1 else "orthonormal"
        for rng, mdp, pi, b in _cases(gamma, 2, 12):
            model = _model(mdp, pi, b, kind)
            factor = value_error_factor(model, 2.0, corrected)
            radius = 2.0 * float(np.linalg.norm(model.theta_star)) + 1.0
            for _ in range(100):
                theta = _in_ball(rng, model.features.dim, radius)
                fails += value_error(model, theta) > factor * model.loss_gap(theta) + 1e-10
                total += 1
    return CheckResult(name, fails == 0, f"{fails}/{total} random parameters exceed the bound")


def check_error_propagation() -> CheckResult:
    fails, total = 0, 0
    for rng, mdp, _, _ in _cases(0.9, 5, 13):
        b = Policy.uniform(mdp.n_states, mdp.n_actions)
        for eps in (0.05, 0.5):
            start = Policy.deterministic(rng.integers(mdp.n_actions, size=mdp.n_states), mdp.n_actions)
            cfg = PolicyIterConfig(K=8, T_eval=1, gamma=0.9, initial_policy=start)
            report = approximate_policy_iteration(mdp, b, cfg, perturbed_evaluator(mdp, [eps] * 8, rng))
            bounds = error_propagation_bound(report, concentrability(mdp, report))
            for r, bound in zip(report.rounds, bounds):
                fails += r.suboptimality > bound + 1e-10
                total += 1
    return CheckResult("policy_iteration_error_propagation", fails == 0, f"{fails}/{total} rounds above the bound")


def all_checks(build=None) -> list[Callable[[], CheckResult]]:
    return [
        check_stationary,
        check_mixing_certificate,
        check_bellman_oracles,
        check_minimizer_roundtrip,
        check_gradient_identity,
        lambda: check_contraction(build),
        lambda: _spectrum("tabular", (0.5, 0.9), "hessian_bound_tabular", ("hessian",)),
        lambda: _spectrum("tabular", (0.5, 0.9), "td_matrix_bound_tabular_as_stated", ("d_matrix",)),
        lambda: _spectrum("tabular", (0.5, 0.9), "td_matrix_bound_tabular_doubly_stochastic", ("d_matrix",), True),
        lambda: _spectrum("anchored", (1.0,), "curvature_bounds_anchored", ("hessian", "d_matrix")),
        lambda: _spectrum("orthonormal", (1.0,), "hessian_bound_orthonormal", ("hessian",)),
        lambda: _spectrum("orthonormal", (1.0,), "td_matrix_bound_orthonormal_as_stated", ("d_matrix",), count=200, seed=8),
        check_orthonormal_euclidean_bound,
        check_direction_bounds,
        check_step_bracket,
        check_step_telescoping,
        check_sparse_equivalence,
        lambda: _value_error_check("value_error_bound_as_stated", False, (0.5, 0.9, 1.0)),
        lambda: _value_error_check("value_error_bound_discount_rate", True, (0.5, 0.9, 1.0)),
        check_error_propagation,
    ]


def run_checks(build=None) -> list[CheckResult]:
    return [explain(check()) for check in all_checks(build)]


def explain(result: CheckResult) -> CheckResult:
    if result.passed or result.name not in KNOWN_GAPS:
        return result
    return CheckResult(result.name, False, result.detail, KNOWN_GAPS[result.name])
