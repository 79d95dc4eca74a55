"""Stochastic update directions for policy evaluation.

Three rules share the sign convention "step along minus the direction":

* ``direct_sgd``: delta(theta, s) w(s), the gradient of the pointwise loss
  using conditional moments (exact or estimated).
* ``td_sgd``: importance-weighted delta(theta, s) times the sampled
  feature difference -zeta + gamma phi(s') - phi(s).
* ``td0``: the classic temporal-difference step, reweighted by
  1/mu_b(s) and the importance ratio so its mean field is an unweighted sum
  over states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimation import EmpiricalModel
from .features import FeatureMap, LossModel
from .mdp import InvalidModelError, Mdp, Policy

KINDS = ("direct_sgd", "td_sgd", "td0")
MODES = ("oracle", "empirical")


@dataclass(frozen=True, eq=False)
class UpdateRule:
    """Immutable description of an update rule.

    With ``strict`` (the default) TD rules refuse targets that take actions
    the behavior policy never takes.  Policy iteration turns this off and
    reports the coverage gap instead.
    """

    kind: str
    target: Policy
    behavior: Policy
    features: FeatureMap
    gamma: float
    mode: str = "oracle"
    strict: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidModelError(f"unknown rule kind {self.kind!r}; expected one of {KINDS}")
        if self.mode not in MODES:
            raise InvalidModelError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.target.probs.shape != self.behavior.probs.shape:
            raise InvalidModelError("target and behavior policies have different shapes")
        if self.features.n_states != self.target.n_states:
            raise InvalidModelError("features and policies disagree on the number of states")
        self.features.check_gamma(self.gamma)
        b = self.behavior.probs
        ratio = np.divide(self.target.probs, b, out=np.zeros_like(b), where=b > 0)
        ratio.setflags(write=False)
        object.__setattr__(self, "ratio", ratio)
        if self.strict and self.kind != "direct_sgd" and not self.covered:
            s, a = (int(x) for x in np.argwhere((self.target.probs > 0) & (b <= 0))[0])
            raise InvalidModelError(
                f"{self.kind} needs behavior support on target actions; b({a}|{s}) = 0"
            )

    @property
    def covered(self) -> bool:
        return not bool(np.any((self.target.probs > 0) & (self.behavior.probs <= 0)))

    def with_mode(self, mode: str) -> "UpdateRule":
        return UpdateRule(self.kind, self.target, self.behavior, self.features, self.gamma, mode, self.strict)


def _moments(rule: UpdateRule, source, s: int):
    if isinstance(source, LossModel):
        return source.moments.xi[s], source.moments.phi_next[s]
    return source.estimate_moments(rule.target, rule.features.phi, s)


def _occupancy(source, s: int) -> float:
    if isinstance(source, LossModel):
        return source.mu_b[s]
    return source.clamped_invariant(s)


def _ratio(rule: UpdateRule, s: int, a: int) -> float:
    if rule.behavior.probs[s, a] <= 0:
        raise InvalidModelError(f"transition uses action {a} in state {s}, which the behavior policy never takes")
    return rule.ratio[s, a]


def direction(rule: UpdateRule, theta: np.ndarray, z, source: LossModel | EmpiricalModel) -> np.ndarray:
    """Update direction at ``theta`` for transition ``z``.

    ``source`` is the exact LossModel (oracle mode) or the running
    EmpiricalModel (empirical mode); only the moments at ``s`` are read.
    """
    s, a, r, sn = z
    phi, zeta, gamma = rule.features.phi, rule.features.zeta, rule.gamma
    if rule.kind == "direct_sgd":
        xi, phi_next = _moments(rule, source, s)
        w = gamma * phi_next - phi[s] - zeta
        return (xi + w @ theta) * w
    rho = _ratio(rule, s, a)
    if rule.kind == "td_sgd":
        xi, phi_next = _moments(rule, source, s)
        delta = xi + (gamma * phi_next - phi[s] - zeta) @ theta
        return (rho * delta) * (gamma * phi[sn] - phi[s] - zeta)
    lifted = phi[s] + zeta
    td_error = r - zeta @ theta + gamma * (phi[sn] @ theta) - phi[s] @ theta
    return (-rho / _occupancy(source, s) * td_error) * lifted


def transition_weights(model: LossModel):
    """Yield (probability, transition) over every (s, a, r, s') with positive mass."""
    mdp: Mdp = model.mdp
    b = model.behavior.probs
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            w_sa = model.mu_b[s] * b[s, a]
            if w_sa <= 0:
                continue
            for ri in np.flatnonzero(mdp.reward_probs[s, a]):
                w_r = w_sa * mdp.reward_probs[s, a, ri]
                r = float(mdp.reward_values[ri])
                for sn in np.flatnonzero(mdp.transition[s, a]):
                    yield w_r * mdp.transition[s, a, sn], (s, a, r, int(sn))


def mean_direction(rule: UpdateRule, theta, model: LossModel) -> np.ndarray:
    """Expected oracle direction under the stationary behavior law, by exhaustive summation."""
    oracle = rule if rule.mode == "oracle" else rule.with_mode("oracle")
    theta = np.asarray(theta, float)
    total = np.zeros(rule.features.dim)
    for weight, z in transition_weights(model):
        total += weight * direction(oracle, theta, z, model)
    return total


def td0_mean_field(model: LossModel, theta) -> np.ndarray:
    """Closed form -sum_s delta(theta, s)(phi(s) + zeta) of the TD(0) mean direction."""
    lifted = model.features.phi + model.features.zeta[None, :]
    return -lifted.T @ model.delta(theta)


def direction_error(rule: UpdateRule, theta, z, empirical: EmpiricalModel, oracle: LossModel) -> float:
    """|g_hat - g| at the same (theta, z)."""
    theta = np.asarray(theta, float)
    g_hat = direction(rule, theta, z, empirical)
    g = direction(rule, theta, z, oracle)
    return float(np.linalg.norm(g_hat - g))


# ---------------------------------------------------------------------------
# closed-form constants


@dataclass(frozen=True)
class DirectionBounds:
    magnitude: float
    lipschitz: float
    error_factor: float | None = None


def problem_scale(mdp: Mdp, features: FeatureMap) -> float:
    """Common bound on |r|, |phi(s)| and |zeta| (Euclidean)."""
    return max(mdp.r_max, features.scale())


def direction_bounds(kind: str, scale: float, radius: float, shift_c: float = 1.0, has_average: bool = False) -> DirectionBounds:
    """Norm and Lipschitz bounds for a rule over the ball of the given radius.

    ``scale`` bounds |r|, |phi(s)|, |zeta|; ``shift_c`` bounds
    pi(a|s)/(mu_b(s) b(a|s)).  ``error_factor`` multiplies the estimation
    error to bound |g_hat - g| (direct_sgd only).
    """
    c0, c1, c = scale, radius, shift_c
    width = 3.0 if has_average else 2.0
    if kind == "direct_sgd":
        return DirectionBounds((c0 + width * c0 * c1) * 3 * c0, 9 * c0**2, c0**2 * (4 + 6 * c1))
    if kind == "td_sgd":
        return DirectionBounds((c0 + width * c0 * c1) * 3 * c * c0, 9 * c * c0**2)
    if kind == "td0":
        return DirectionBounds(c * (c0 + 3 * c0 * c1) * 2 * c0, 6 * c * c0**2)
    raise ValueError(f"unknown rule kind {kind!r}")
