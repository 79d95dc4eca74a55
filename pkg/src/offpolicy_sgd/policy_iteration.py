"""Approximate policy iteration on top of offline policy evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .engine import ProjectionSet, StepSchedule, run
from .estimation import EmpiricalModel
from .features import build_loss_model, contraction_constant, tabular_features
from .mdp import (
    ChainError,
    InvalidModelError,
    Mdp,
    Policy,
    ShiftConstants,
    exact_values,
    limiting_distribution,
    shift_constants,
    stationary_distribution,
    transition_kernel,
)
from .tabular import sparse_tabular_run
from .trajectory import SamplerConfig, make_rng, sample_trajectory
from .updates import UpdateRule


class EvaluationDiverged(RuntimeError):
    def __init__(self, round_index: int, start_gap: float, end_gap: float):
        super().__init__(
            f"evaluation diverged in round {round_index}: loss gap grew from {start_gap:.3g} to {end_gap:.3g}"
        )
        self.round_index = round_index


def q_values(mdp: Mdp, values, gamma: float | None = None) -> np.ndarray:
    gamma = mdp.gamma if gamma is None else gamma
    return mdp.expected_reward + gamma * mdp.transition @ np.asarray(values, float)


def greedy_improve(mdp: Mdp, v_hat, gamma: float | None = None) -> Policy:
    """Deterministic greedy policy; ties go to the lowest action index."""
    gamma = mdp.gamma if gamma is None else gamma
    if gamma >= 1.0:
        raise InvalidModelError("greedy improvement is defined here for gamma < 1")
    q = q_values(mdp, v_hat, gamma)
    return Policy.deterministic(np.argmax(q, axis=1), mdp.n_actions)


def policy_values(mdp: Mdp, policy: Policy) -> np.ndarray:
    return exact_values(mdp, policy).discounted_value


def occupancy(mdp: Mdp, policy: Policy) -> np.ndarray:
    """Stationary law of the policy's chain; long-run occupancy from a uniform start if it is not unique."""
    kernel = transition_kernel(mdp, policy)
    try:
        return stationary_distribution(kernel)
    except ChainError:
        return limiting_distribution(kernel, np.full(mdp.n_states, 1.0 / mdp.n_states))


def exact_policy_iteration(mdp: Mdp, initial: Policy, max_rounds: int = 1000) -> list[Policy]:
    """Policies visited by exact policy iteration until the greedy step is a fixed point."""
    policies = [initial]
    for _ in range(max_rounds):
        nxt = greedy_improve(mdp, policy_values(mdp, policies[-1]))
        if np.array_equal(nxt.probs, policies[-1].probs):
            break
        policies.append(nxt)
    return policies


def optimal_oracle(mdp: Mdp, tol: float = 1e-12) -> tuple[Policy, np.ndarray]:
    """Value iteration to a sup-norm change of ``tol``, then exact policy-iteration polishing."""
    if mdp.gamma >= 1.0:
        raise InvalidModelError("the optimal-control oracle needs gamma < 1")
    v = np.zeros(mdp.n_states)
    while True:
        v_new = q_values(mdp, v).max(axis=1)
        if np.abs(v_new - v).max() <= tol:
            v = v_new
            break
        v = v_new
    pi = exact_policy_iteration(mdp, greedy_improve(mdp, v))[-1]
    return pi, policy_values(mdp, pi)


# ---------------------------------------------------------------------------


@dataclass
class PolicyIterConfig:
    """Settings for approximate policy iteration.

    ``schedule`` follows :func:`schedule_from_spec`; the default uses
    c = 1 - gamma because greedy (deterministic) targets often have a TD(0)
    mean field that is not a Euclidean contraction.  ``projection`` defaults to the box
    |theta_i| <= r_max / (1 - gamma), which contains every value function.
    """

    K: int
    T_eval: int
    gamma: float
    eval_rule: str = "td0"
    mode: str = "empirical"
    schedule: dict = field(default_factory=lambda: {"variant": "contraction", "c": "discount"})
    projection: ProjectionSet | None = None
    seed: int = 0
    sampler_mode: str = "markov"
    initial_policy: Policy | None = None

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise InvalidModelError("policy iteration needs 0 < gamma < 1")
        if self.K < 0:
            raise InvalidModelError("K must be non-negative")
        if self.T_eval < 1:
            raise InvalidModelError("T_eval must be at least 1")


@dataclass
class RoundRecord:
    k: int
    policy: Policy
    suboptimality: float
    shift: ShiftConstants
    eps_hat: float | None = None
    v_hat: np.ndarray | None = None

    @property
    def shift_c(self) -> float:
        return max(self.shift.policy_ratio_c, self.shift.measure_ratio_c)


@dataclass
class IterationReport:
    rounds: list[RoundRecord]
    pi_star: Policy
    v_star: np.ndarray
    mu_star: np.ndarray
    gamma: float

    @property
    def final_policy(self) -> Policy:
        return self.rounds[-1].policy

    def diagnostics(self) -> list[str]:
        return [f"round {r.k}: {r.shift.diagnostic}" for r in self.rounds if r.shift.diagnostic]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["k", "eps_hat", "suboptimality", "shift_c"])
            for r in self.rounds:
                out.writerow([r.k, "" if r.eps_hat is None else repr(r.eps_hat), repr(r.suboptimality), repr(r.shift_c)])


def suboptimality(mdp: Mdp, policy: Policy, v_star, mu_star) -> float:
    return float(mu_star @ (np.asarray(v_star) - policy_values(mdp, policy)))


def evaluation_error(mdp: Mdp, policy: Policy, v_hat) -> float:
    """mu^pi-weighted l1 distance between exact and estimated values."""
    return float(occupancy(mdp, policy) @ np.abs(policy_values(mdp, policy) - np.asarray(v_hat)))


Evaluator = Callable[[Policy, int], np.ndarray]


def sgd_evaluator(mdp: Mdp, behavior: Policy, config: PolicyIterConfig) -> Evaluator:
    """Offline evaluation of each policy on a fresh behavior trajectory with tabular features.

    Uses the sparse tabular loop (same iterates as the generic engine) and
    checks the averaged iterate's loss gap against the starting one.
    """
    features = tabular_features(mdp.n_states, config.gamma)
    pset = config.projection or ProjectionSet.box(max(mdp.r_max, 1e-12) / (1.0 - config.gamma))

    def evaluate(policy: Policy, k: int) -> np.ndarray:
        oracle = build_loss_model(mdp, policy, behavior, features)
        schedule = schedule_from_spec(config.schedule, oracle, config.eval_rule)
        data = sample_trajectory(
            mdp, behavior, SamplerConfig(config.T_eval, config.sampler_mode, None, config.seed),
            make_rng(config.seed, k),
        )
        theta0 = np.zeros(features.dim)
        source = EmpiricalModel.for_mdp(mdp) if config.mode == "empirical" else oracle
        if pset.shape == "box":
            _, theta_bar = sparse_tabular_run(
                config.eval_rule, data, policy, behavior, config.gamma, schedule, pset, theta0, source
            )
        else:
            rule = UpdateRule(config.eval_rule, policy, behavior, features, config.gamma, config.mode, strict=False)
            estimator = source if config.mode == "empirical" else None
            theta_bar = run(rule, data, schedule, pset, theta0, oracle=oracle, estimator=estimator).theta_bar
        start_gap = oracle.loss_gap(theta0)
        end_gap = oracle.loss_gap(theta_bar)
        if end_gap > 10.0 * start_gap and end_gap > 1e-12:
            raise EvaluationDiverged(k, start_gap, end_gap)
        return features.values(theta_bar)

    return evaluate


def schedule_from_spec(spec: dict, oracle, rule_kind: str) -> StepSchedule:
    """Build a step schedule from a config dict.

    For the contraction variant ``c`` may be a number, ``"auto"`` (the exact
    contraction constant of ``oracle``, which must be positive) or
    ``"discount"``: 1 - gamma, a lower bound on the real parts of the TD(0)
    mean-field eigenvalues in the tabular discounted case.
    """
    variant = spec.get("variant", "contraction")
    if variant == "inverse_sqrt":
        return StepSchedule.inverse_sqrt(float(spec.get("eta0", 1.0)))
    if variant != "contraction":
        raise InvalidModelError(f"unknown schedule variant {variant!r}")
    c = spec.get("c", "auto")
    if c == "discount":
        c = 1.0 - oracle.gamma
    elif c == "auto":
        c = contraction_constant(oracle, rule_kind)
        if c <= 0:
            raise InvalidModelError(
                f"mean field of {rule_kind} is not a Euclidean contraction here (c = {c:.3g}); give c explicitly"
            )
    return StepSchedule.contraction(float(c), spec.get("eta1"))


def approximate_policy_iteration(
    mdp: Mdp,
    behavior: Policy,
    config: PolicyIterConfig,
    evaluator: Evaluator | None = None,
) -> IterationReport:
    """K rounds of evaluate-then-improve starting from ``config.initial_policy`` (default: behavior).

    Round k evaluates pi_{k-1} with ``evaluator`` (default: the offline SGD
    pipeline) and sets pi_k greedy with respect to the estimate.
    """
    mdp = mdp.with_gamma(config.gamma) if mdp.gamma != config.gamma else mdp
    pi_star, v_star = optimal_oracle(mdp)
    mu_star = occupancy(mdp, pi_star)
    evaluate = evaluator or sgd_evaluator(mdp, behavior, config)
    policy = config.initial_policy or behavior

    def record(k: int, pol: Policy) -> RoundRecord:
        return RoundRecord(k, pol, suboptimality(mdp, pol, v_star, mu_star), shift_constants(mdp, pol, behavior))

    rounds = [record(0, policy)]
    for k in range(1, config.K + 1):
        v_hat = np.asarray(evaluate(policy, k), dtype=float)
        rounds[-1].v_hat = v_hat
        rounds[-1].eps_hat = evaluation_error(mdp, policy, v_hat)
        policy = greedy_improve(mdp, v_hat)
        rounds.append(record(k, policy))
    return IterationReport(rounds, pi_star, v_star, mu_star, config.gamma)


# ---------------------------------------------------------------------------
# error propagation


def concentrability(mdp: Mdp, report: IterationReport) -> float:
    """Smallest C with mu* <= C mu^{pi_k} and mu^{pi_k} <= C mu^{pi_{k-1}} along the report."""
    mus = [occupancy(mdp, r.policy) for r in report.rounds]
    ratios = [_ratio(report.mu_star, mus[0])]
    for prev, cur in zip(mus, mus[1:]):
        ratios += [_ratio(report.mu_star, cur), _ratio(cur, prev)]
    return max(ratios)


def _ratio(num, den) -> float:
    live = num > 1e-14
    if np.any(den[live] <= 1e-14):
        return float("inf")
    return float(np.max(num[live] / den[live], initial=0.0))


def error_propagation_bound(report: IterationReport, c: float) -> list[float]:
    """gamma^K Delta_0 + sum_{k<=K} gamma^{K-k} C^2 eps_k / (1-gamma) for K = 0..len-1.

    ``eps_k`` is the evaluation error of the policy improved in round k.
    """
    g = report.gamma
    delta0 = report.rounds[0].suboptimality
    eps = [r.eps_hat for r in report.rounds[:-1]]
    bounds = []
    for K in range(len(report.rounds)):
        tail = sum(g ** (K - k) * eps[k - 1] for k in range(1, K + 1))
        bounds.append(g**K * delta0 + c * c * tail / (1.0 - g))
    return bounds


def perturbed_evaluator(mdp: Mdp, errors, rng: np.random.Generator) -> Evaluator:
    """Exact values plus a random perturbation scaled so its mu^pi-weighted l1 size is errors[k-1]."""

    def evaluate(policy: Policy, k: int) -> np.ndarray:
        v = policy_values(mdp, policy)
        noise = rng.standard_normal(mdp.n_states)
        size = occupancy(mdp, policy) @ np.abs(noise)
        eps = errors[k - 1] if np.ndim(errors) else errors
        return v if eps == 0 or size == 0 else v + noise * (eps / size)

    return evaluate
