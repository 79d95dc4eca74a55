"""Finite MDPs, induced Markov chains and exact linear-algebra oracles."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROB_TOL = 1e-12
MIXING_CAP = 100_000


class InvalidModelError(ValueError):
    """An MDP, policy or feature map violates one of its invariants."""


class ChainError(ValueError):
    """A Markov chain lacks the structure an oracle needs (ergodicity, aperiodicity)."""


def _check_distribution(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvalidModelError(f"{what}: non-finite probability")
    if np.any(arr < 0):
        raise InvalidModelError(f"{what}: negative probability")
    sums = arr.sum(axis=-1)
    bad = np.abs(sums - 1.0) > PROB_TOL
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise InvalidModelError(
            f"{what}: row {idx} sums to {float(sums[idx])!r}, expected 1 within {PROB_TOL}"
        )


@dataclass(frozen=True, eq=False)
class Mdp:
    """Finite MDP with finite-support reward distributions.

    ``reward_values`` is the global sorted list of reward outcomes and
    ``reward_probs[s, a, i]`` is the probability of ``reward_values[i]``
    after taking ``a`` in ``s``.  A value is in the declared support of
    ``(s, a)`` when its probability is positive.
    """

    transition: np.ndarray
    reward_values: np.ndarray
    reward_probs: np.ndarray
    gamma: float

    def __post_init__(self):
        p = np.array(self.transition, dtype=float)
        vals = np.array(self.reward_values, dtype=float).reshape(-1)
        rp = np.array(self.reward_probs, dtype=float)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or p.shape[0] < 1 or p.shape[1] < 1:
            raise InvalidModelError(f"transition must have shape (S, A, S), got {p.shape}")
        if rp.shape != p.shape[:2] + vals.shape:
            raise InvalidModelError(
                f"reward_probs must have shape {p.shape[:2] + vals.shape}, got {rp.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise InvalidModelError("reward values must be finite")
        if len(np.unique(vals)) != len(vals):
            raise InvalidModelError("reward values must be distinct")
        _check_distribution(p, "transition")
        _check_distribution(rp, "reward distribution")
        if not (0.0 < float(self.gamma) <= 1.0):
            raise InvalidModelError(f"gamma must lie in (0, 1], got {self.gamma}")
        for arr in (p, vals, rp):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward_values", vals)
        object.__setattr__(self, "reward_probs", rp)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def expected_reward(self) -> np.ndarray:
        """Mean reward per (s, a)."""
        return self.reward_probs @ self.reward_values

    @property
    def reward_support(self) -> np.ndarray:
        """Boolean mask (S, A, R) of declared reward outcomes."""
        return self.reward_probs > 0

    @property
    def r_max(self) -> float:
        used = self.reward_support.any(axis=(0, 1))
        return float(np.max(np.abs(self.reward_values[used]), initial=0.0))

    def with_gamma(self, gamma: float) -> "Mdp":
        return Mdp(self.transition, self.reward_values, self.reward_probs, gamma)


@dataclass(frozen=True, eq=False)
class Policy:
    """Stochastic policy, ``probs[s, a] = pi(a|s)``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise InvalidModelError(f"policy probs must have shape (S, A), got {p.shape}")
        _check_distribution(p, "policy")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    def is_deterministic(self) -> bool:
        return bool(np.all((self.probs == 0) | (self.probs == 1)))

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


def _check_dims(mdp: Mdp, policy: Policy) -> None:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise InvalidModelError(
            f"policy shape {policy.probs.shape} does not match MDP "
            f"({mdp.n_states} states, {mdp.n_actions} actions)"
        )


def transition_kernel(mdp: Mdp, policy: Policy) -> np.ndarray:
    """State-to-state kernel induced by following ``policy``."""
    _check_dims(mdp, policy)
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def policy_reward(mdp: Mdp, policy: Policy) -> np.ndarray:
    """Expected one-step reward per state under ``policy``."""
    _check_dims(mdp, policy)
    return np.einsum("sa,sa->s", policy.probs, mdp.expected_reward)


# ---------------------------------------------------------------------------
# chain oracles


def stationary_distribution(kernel: np.ndarray) -> np.ndarray:
    """Unique stationary distribution from the augmented linear system.

    Raises ChainError when the chain has more than one closed class.
    """
    p = np.asarray(kernel, dtype=float)
    n = p.shape[0]
    a = np.vstack([p.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    if np.linalg.matrix_rank(a, tol=1e-10) < n:
        raise ChainError("stationary distribution is not unique: chain is reducible")
    mu, *_ = np.linalg.lstsq(a, b, rcond=None)
    # transient states come back as round-off; support tests rely on exact zeros
    mu[mu < 1e-14] = 0.0
    return mu / mu.sum()


def limiting_distribution(kernel: np.ndarray, initial: np.ndarray, abel: float = 1e-10) -> np.ndarray:
    """Long-run occupancy from ``initial``, valid for reducible chains too.

    Uses the Abel limit (1-a) x (I - a P)^{-1} with a = 1 - ``abel``, which
    agrees with the Cesaro limit on finite chains.
    """
    p = np.asarray(kernel, dtype=float)
    alpha = 1.0 - abel
    occ = np.linalg.solve((np.eye(len(p)) - alpha * p).T, np.asarray(initial, float)) * abel
    occ = np.clip(occ, 0.0, None)
    return occ / occ.sum()


def variance_contraction(kernel: np.ndarray, mu: np.ndarray) -> float:
    """Smallest rho with var_mu(P f) <= rho^2 var_mu(f) for every f.

    Computed on the support of ``mu`` (a closed set), as the operator norm of
    M P M^{-1} restricted to the orthogonal complement of sqrt(mu), M = diag(sqrt(mu)).
    """
    p = np.asarray(kernel, dtype=float)
    keep = mu > 0
    sub = p[np.ix_(keep, keep)]
    m = mu[keep]
    if len(m) == 1:
        return 0.0
    root = np.sqrt(m)
    conj = root[:, None] * sub / root[None, :]
    proj = np.eye(len(m)) - np.outer(root, root)
    return float(np.linalg.norm(conj @ proj, 2))


def mixing_time(kernel: np.ndarray, mu: np.ndarray, cap: int = MIXING_CAP) -> int:
    """Smallest t >= 1 with max_s TV(P^t(s, .), mu) <= 1/4."""
    p = np.asarray(kernel, dtype=float)
    dist = np.eye(len(p))
    for t in range(1, cap + 1):
        dist = dist @ p
        if 0.5 * np.abs(dist - mu).sum(axis=1).max() <= 0.25:
            return t
    raise ChainError(f"chain does not mix within {cap} steps (periodic or reducible)")


@dataclass(frozen=True, eq=False)
class ChainAnalysis:
    """Stationary law, spectral gap and mixing time of a kernel.

    ``spectral_gap`` is the variance-contraction gap 1 - rho, where rho is the
    smallest factor with var_mu(Pf) <= rho^2 var_mu(f).  ``eigen_gap`` is
    1 - |second eigenvalue modulus|; the two agree for reversible chains.
    """

    kernel: np.ndarray
    stationary: np.ndarray
    spectral_gap: float
    eigen_gap: float
    mixing_time: int


def analyze_chain(kernel: np.ndarray, cap: int = MIXING_CAP) -> ChainAnalysis:
    p = np.array(kernel, dtype=float)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise InvalidModelError(f"kernel must be square, got {p.shape}")
    _check_distribution(p, "kernel")
    mu = stationary_distribution(p)
    tau = mixing_time(p, mu, cap)
    rho = variance_contraction(p, mu)
    moduli = np.sort(np.abs(np.linalg.eigvals(p)))[::-1]
    second = moduli[1] if len(moduli) > 1 else 0.0
    p.setflags(write=False)
    mu.setflags(write=False)
    return ChainAnalysis(
        kernel=p,
        stationary=mu,
        spectral_gap=float(min(1.0, max(0.0, 1.0 - rho))),
        eigen_gap=float(min(1.0, max(0.0, 1.0 - second))),
        mixing_time=tau,
    )


# ---------------------------------------------------------------------------
# value oracles


@dataclass(frozen=True, eq=False)
class ValueOracle:
    """Exact values of a policy; unused fields are None for the other regime."""

    discounted_value: np.ndarray | None = None
    average_reward: float | None = None
    bias: np.ndarray | None = None

    def unified(self) -> tuple[np.ndarray, float]:
        """(V, rbar) pair solving the unified Bellman equation."""
        if self.discounted_value is not None:
            return self.discounted_value, 0.0
        return self.bias, self.average_reward


def exact_values(mdp: Mdp, policy: Policy) -> ValueOracle:
    p = transition_kernel(mdp, policy)
    r = policy_reward(mdp, policy)
    n = mdp.n_states
    if mdp.gamma < 1.0:
        v = np.linalg.solve(np.eye(n) - mdp.gamma * p, r)
        return ValueOracle(discounted_value=v)
    mu = stationary_distribution(p)
    rbar = float(mu @ r)
    a = np.vstack([np.eye(n) - p, mu[None, :]])
    b = np.concatenate([r - rbar, [0.0]])
    bias, *_ = np.linalg.lstsq(a, b, rcond=None)
    resid = np.abs(a @ bias - b).max()
    if resid > 1e-9:
        raise ChainError(f"bias equation is inconsistent (residual {resid:.3g}); chain is not ergodic")
    return ValueOracle(average_reward=rbar, bias=bias)


def bellman_residual(mdp: Mdp, policy: Policy, values: np.ndarray, rbar: float = 0.0) -> np.ndarray:
    """xi(s) - rbar + gamma (P V)(s) - V(s) for the unified Bellman equation."""
    v = np.asarray(values, dtype=float)
    if v.shape != (mdp.n_states,):
        raise InvalidModelError(f"value vector must have length {mdp.n_states}")
    if mdp.gamma < 1.0 and rbar != 0.0:
        raise InvalidModelError("average reward must be 0 when gamma < 1")
    p = transition_kernel(mdp, policy)
    return policy_reward(mdp, policy) - rbar + mdp.gamma * (p @ v) - v


# ---------------------------------------------------------------------------
# distribution shift


@dataclass(frozen=True)
class ShiftConstants:
    policy_ratio_c: float
    measure_ratio_c: float
    diagnostic: str = ""

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.policy_ratio_c) and np.isfinite(self.measure_ratio_c))


def _max_ratio(num: np.ndarray, den: np.ndarray) -> float:
    num = np.asarray(num, float).ravel()
    den = np.asarray(den, float).ravel()
    live = num > 0
    if np.any(den[live] <= 0):
        return float("inf")
    if not np.any(live):
        return 0.0
    return float(np.max(num[live] / den[live]))


def shift_constants(mdp: Mdp, target: Policy, behavior: Policy) -> ShiftConstants:
    _check_dims(mdp, target)
    mu_b = stationary_distribution(transition_kernel(mdp, behavior))
    notes = []
    policy_c = _max_ratio(target.probs, mu_b[:, None] * behavior.probs)
    if not np.isfinite(policy_c):
        uncovered = np.argwhere((target.probs > 0) & (behavior.probs <= 0))
        if len(uncovered):
            s, a = (int(x) for x in uncovered[0])
            notes.append(f"unsupported coverage: target takes action {a} in state {s}, behavior never does")
        else:
            notes.append("unsupported coverage: behavior chain never visits a target-relevant state")
    try:
        mu_pi = stationary_distribution(transition_kernel(mdp, target))
    except ChainError:
        notes.append("target chain is reducible; stationary distribution not unique")
        return ShiftConstants(policy_c, float("inf"), "; ".join(notes))
    measure_c = _max_ratio(mu_pi, mu_b)
    if not np.isfinite(measure_c):
        notes.append("target stationary mass on states the behavior chain never visits")
    return ShiftConstants(policy_c, measure_c, "; ".join(notes))


# ---------------------------------------------------------------------------
# construction helpers


def mdp_from_expected(transition, rewards, gamma: float) -> Mdp:
    """MDP with deterministic rewards ``rewards[s, a]``."""
    r = np.asarray(rewards, dtype=float)
    values = np.unique(r)
    probs = (r[..., None] == values).astype(float)
    return Mdp(np.asarray(transition, float), values, probs, gamma)


def random_mdp(
    n_states: int,
    n_actions: int,
    gamma: float,
    rng: np.random.Generator,
    reward_range: tuple[float, float] = (0.0, 1.0),
    reward_levels: int = 2,
    concentration: float = 1.0,
) -> Mdp:
    """Dense random MDP: Dirichlet transitions and random finite-support rewards.

    Every transition probability is positive, so every policy induces an
    ergodic chain.
    """
    transition = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    lo, hi = reward_range
    values = np.unique(np.round(rng.uniform(lo, hi, size=(n_states, n_actions, reward_levels)), 6))
    probs = np.zeros((n_states, n_actions, len(values)))
    for s in range(n_states):
        for a in range(n_actions):
            picks = rng.choice(len(values), size=reward_levels, replace=False)
            probs[s, a, picks] = rng.dirichlet(np.ones(reward_levels))
    probs /= probs.sum(axis=-1, keepdims=True)
    used = probs.any(axis=(0, 1))
    return Mdp(transition, values[used], probs[..., used], gamma)


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator, floor: float = 0.05) -> Policy:
    """Random policy with every action probability at least ``floor``."""
    raw = rng.dirichlet(np.ones(n_actions), size=n_states)
    probs = floor + (1.0 - floor * n_actions) * raw
    return Policy(probs / probs.sum(axis=1, keepdims=True))


def stay_or_swap_mdp(gamma: float = 0.9, rewards=(1.0, 0.0)) -> Mdp:
    """Two states, action 0 stays put, action 1 swaps; reward depends on the state."""
    p = np.zeros((2, 2, 2))
    p[0, 0, 0] = p[1, 0, 1] = 1.0
    p[0, 1, 1] = p[1, 1, 0] = 1.0
    r = np.array([[rewards[0]] * 2, [rewards[1]] * 2])
    return mdp_from_expected(p, r, gamma)


def two_state_test_mdp(gamma: float = 0.5, swap_prob: float = 0.2) -> Mdp:
    """Two states with reward (1, 0); action 0 stays, action 1 swaps w.p. ``swap_prob``.

    Under the uniform policy the chain is [[0.9, 0.1], [0.1, 0.9]].
    """
    p = np.zeros((2, 2, 2))
    p[0, 0, 0] = p[1, 0, 1] = 1.0
    p[0, 1] = (1 - swap_prob, swap_prob)
    p[1, 1] = (swap_prob, 1 - swap_prob)
    r = np.array([[1.0, 1.0], [0.0, 0.0]])
    return mdp_from_expected(p, r, gamma)


def single_state_mdp(reward: float = 1.0, gamma: float = 0.5, n_actions: int = 1) -> Mdp:
    p = np.ones((1, n_actions, 1))
    return mdp_from_expected(p, np.full((1, n_actions), reward), gamma)


# ---------------------------------------------------------------------------
# JSON


def mdp_to_dict(mdp: Mdp) -> dict:
    rewards = [
        [
            [{"r": float(mdp.reward_values[i]), "p": float(mdp.reward_probs[s, a, i])}
             for i in np.flatnonzero(mdp.reward_probs[s, a])]
            for a in range(mdp.n_actions)
        ]
        for s in range(mdp.n_states)
    ]
    return {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "transition": mdp.transition.tolist(),
        "rewards": rewards,
    }


def mdp_from_dict(data: dict) -> Mdp:
    try:
        n_s, n_a = int(data["n_states"]), int(data["n_actions"])
        transition = np.asarray(data["transition"], dtype=float)
        table = data["rewards"]
        gamma = float(data["gamma"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidModelError(f"malformed MDP document: {exc}") from exc
    if transition.shape != (n_s, n_a, n_s):
        raise InvalidModelError(f"transition shape {transition.shape} != ({n_s}, {n_a}, {n_s})")
    if len(table) != n_s or any(len(row) != n_a for row in table):
        raise InvalidModelError("rewards must be indexed [state][action]")
    values = sorted({float(e["r"]) for row in table for cell in row for e in cell})
    index = {v: i for i, v in enumerate(values)}
    probs = np.zeros((n_s, n_a, len(values)))
    for s, row in enumerate(table):
        for a, cell in enumerate(row):
            for e in cell:
                probs[s, a, index[float(e["r"])]] += float(e["p"])
    return Mdp(transition, np.array(values), probs, gamma)


def load_mdp(path: str | Path) -> Mdp:
    with open(path) as fh:
        return mdp_from_dict(json.load(fh))


def save_mdp(mdp: Mdp, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(mdp_to_dict(mdp), fh, indent=1)


def load_policy(path: str | Path) -> Policy:
    with open(path) as fh:
        data = json.load(fh)
    try:
        return Policy(np.asarray(data["probs"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidModelError(f"malformed policy document: {exc}") from exc


def save_policy(policy: Policy, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump({"probs": policy.probs.tolist()}, fh)
