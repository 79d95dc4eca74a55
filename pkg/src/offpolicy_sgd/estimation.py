"""Running sample-average estimates of the model and the behavior occupancy."""

from __future__ import annotations

import numpy as np

from .mdp import InvalidModelError, Mdp, Policy, policy_reward, stationary_distribution, transition_kernel


class EmpiricalModel:
    """Count tables for an offline stream plus cached conditional estimates.

    The only writer is :meth:`update`.  Unvisited ``(s, a)`` pairs fall back
    to the uniform distribution over successors and to the mean of the
    declared reward support.
    """

    def __init__(self, n_states: int, n_actions: int, reward_values, reward_support):
        self.n_states = n_states
        self.n_actions = n_actions
        self.reward_values = np.asarray(reward_values, dtype=float)
        self.reward_support = np.asarray(reward_support, dtype=bool)
        n_r = len(self.reward_values)
        self.count_sa = np.zeros((n_states, n_actions), dtype=np.int64)
        self.count_sas = np.zeros((n_states, n_actions, n_states), dtype=np.int64)
        self.count_sar = np.zeros((n_states, n_actions, n_r), dtype=np.int64)
        self.count_s = np.zeros(n_states, dtype=np.int64)
        self.t = 0
        self._reward_index = {v: i for i, v in enumerate(self.reward_values.tolist())}
        support_size = np.maximum(self.reward_support.sum(axis=-1), 1)
        self._r_fallback = (self.reward_support @ self.reward_values) / support_size
        self._p_sa = np.full((n_states, n_actions, n_states), 1.0 / n_states)
        self._r_sa = self._r_fallback.copy()
        # conditional estimates are refreshed lazily, per state, when read
        self._stale = [False] * n_states

    @classmethod
    def for_mdp(cls, mdp: Mdp) -> "EmpiricalModel":
        """Empty model using only the MDP's declared shapes and reward support."""
        return cls(mdp.n_states, mdp.n_actions, mdp.reward_values, mdp.reward_support)

    def update(self, z) -> "EmpiricalModel":
        s, a, r, sn = z
        ri = self._reward_index.get(float(r))
        if ri is None or not self.reward_support[s, a, ri]:
            raise InvalidModelError(f"reward {r!r} is not in the declared support of ({s}, {a})")
        self.count_sa[s, a] += 1
        self.count_sas[s, a, sn] += 1
        self.count_sar[s, a, ri] += 1
        self.count_s[s] += 1
        self.t += 1
        self._stale[s] = True
        return self

    def _refresh(self, s: int) -> None:
        n = self.count_sa[s]
        seen = n > 0
        safe = np.where(seen, n, 1)
        self._p_sa[s] = np.where(seen[:, None], self.count_sas[s] / safe[:, None], 1.0 / self.n_states)
        self._r_sa[s] = np.where(seen, self.count_sar[s] @ self.reward_values / safe, self._r_fallback[s])
        self._stale[s] = False

    def update_all(self, data) -> "EmpiricalModel":
        for z in data:
            self.update(z)
        return self

    def load_expected_counts(self, mdp: Mdp, weights: np.ndarray) -> "EmpiricalModel":
        """Overwrite the tables with exact expected counts ``weights[s, a]`` times the model.

        Counts become real-valued; used to check estimator consistency.
        """
        w = np.asarray(weights, dtype=float)
        self.count_sa = w.copy()
        self.count_sas = w[..., None] * mdp.transition
        self.count_sar = w[..., None] * mdp.reward_probs
        self.count_s = w.sum(axis=1)
        self.t = float(w.sum())
        self._stale = [True] * self.n_states
        return self

    # -- estimates ----------------------------------------------------------

    def transition_estimates(self) -> np.ndarray:
        """p_hat(s'|s, a) for every pair, fallback included."""
        for s in range(self.n_states):
            if self._stale[s]:
                self._refresh(s)
        return self._p_sa.copy()

    def estimate_transition(self, target: Policy, s: int) -> np.ndarray:
        if self._stale[s]:
            self._refresh(s)
        return target.probs[s] @ self._p_sa[s]

    def estimate_reward(self, target: Policy, s: int) -> float:
        if self._stale[s]:
            self._refresh(s)
        return float(target.probs[s] @ self._r_sa[s])

    def estimate_moments(self, target: Policy, phi: np.ndarray, s: int) -> tuple[float, np.ndarray]:
        """(xi_hat(s), phi_hat(s)) for a feature matrix ``phi`` of shape (S, d)."""
        if self._stale[s]:
            self._refresh(s)
        pi_s = target.probs[s]
        return float(pi_s @ self._r_sa[s]), (pi_s @ self._p_sa[s]) @ phi

    def estimate_invariant(self, s: int) -> float:
        if self.t < 1:
            raise ValueError("occupancy estimate needs at least one observation")
        return self.count_s[s] / self.t

    def occupancy_floor(self) -> float:
        return 1.0 / (2.0 * max(self.t, 1) * self.n_states)

    def clamped_invariant(self, s: int) -> float:
        """Occupancy estimate clamped below at 1/(2 t |S|), safe to invert."""
        if self.t < 1:
            return 1.0 / self.n_states
        return max(self.count_s[s] / self.t, self.occupancy_floor())

    def check_consistency(self) -> bool:
        return bool(
            np.array_equal(self.count_sa, self.count_sas.sum(axis=-1))
            and np.array_equal(self.count_sa, self.count_sar.sum(axis=-1))
            and self.count_s.sum() == self.t
        )

    def to_dict(self) -> dict:
        return {
            "t": int(self.t),
            "count_s": self.count_s.tolist(),
            "count_sa": self.count_sa.tolist(),
            "count_sas": self.count_sas.tolist(),
            "count_sar": self.count_sar.tolist(),
            "reward_values": self.reward_values.tolist(),
        }


class ErrorTrace:
    """Per-step estimation error against a known model.

    ``step(model, s)`` returns the largest of the l1 transition error at
    ``s``, the l1 reward-distribution error at ``s`` and the error of the
    inverse occupancy estimate at ``s``.  The l1 norms dominate the sup norms
    and make the direction-error bounds hold verbatim.
    """

    def __init__(self, mdp: Mdp, target: Policy, behavior: Policy):
        self.mdp = mdp
        self.target = target
        self.kernel = transition_kernel(mdp, target)
        self.reward_dist = np.einsum("sa,sar->sr", target.probs, mdp.reward_probs)
        self.mu_b = stationary_distribution(transition_kernel(mdp, behavior))
        self.values: list[float] = []

    def error(self, model: EmpiricalModel, s: int) -> float:
        pi_s = self.target.probs[s]
        p_err = np.abs(model.estimate_transition(self.target, s) - self.kernel[s]).sum()
        n = model.count_sa[s]
        seen = n > 0
        r_hat = np.where(
            seen[:, None],
            model.count_sar[s] / np.maximum(n, 1)[:, None],
            model.reward_support[s] / np.maximum(model.reward_support[s].sum(-1, keepdims=True), 1),
        )
        r_err = np.abs(pi_s @ r_hat - self.reward_dist[s]).sum()
        mu_err = abs(1.0 / model.clamped_invariant(s) - 1.0 / self.mu_b[s])
        return float(max(p_err, r_err, mu_err))

    def step(self, model: EmpiricalModel, s: int) -> float:
        e = self.error(model, s)
        self.values.append(e)
        return e


def exact_moments(mdp: Mdp, target: Policy, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Oracle (xi, phi_next) for comparison with the plug-in estimates."""
    return policy_reward(mdp, target), transition_kernel(mdp, target) @ phi
