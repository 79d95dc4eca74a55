"""Linear parameterizations of the unified value function and the Bellman loss.

A parameter ``theta`` encodes ``V(s) = phi(s) . theta`` and the average
reward ``rbar = zeta . theta`` (``zeta = 0`` in the discounted case).  The
loss is the behavior-weighted squared Bellman residual

    l(theta) = sum_s mu_b(s) * 0.5 * delta(theta, s)^2,
    delta(theta, s) = xi(s) + w(s) . theta,   w(s) = -zeta + gamma phi_next(s) - phi(s).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import (
    InvalidModelError,
    Mdp,
    Policy,
    policy_reward,
    stationary_distribution,
    transition_kernel,
)


class NotRealizableError(ValueError):
    """No parameter reproduces the target's values exactly under the given features."""


@dataclass(frozen=True, eq=False)
class FeatureMap:
    phi: np.ndarray
    zeta: np.ndarray

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        zeta = np.array(self.zeta, dtype=float).reshape(-1)
        if phi.ndim != 2 or phi.shape[1] != zeta.shape[0]:
            raise InvalidModelError(f"phi {phi.shape} and zeta {zeta.shape} disagree on the dimension")
        overlap = np.abs(phi @ zeta).max()
        if overlap > 1e-12:
            raise InvalidModelError(f"zeta must be orthogonal to every phi(s); max |phi(s).zeta| = {overlap:.3g}")
        phi.setflags(write=False)
        zeta.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "zeta", zeta)

    @property
    def dim(self) -> int:
        return self.phi.shape[1]

    @property
    def n_states(self) -> int:
        return self.phi.shape[0]

    @property
    def has_average(self) -> bool:
        return bool(np.any(self.zeta != 0))

    def values(self, theta) -> np.ndarray:
        return self.phi @ np.asarray(theta, float)

    def average_reward(self, theta) -> float:
        return float(self.zeta @ np.asarray(theta, float))

    def scale(self) -> float:
        """Largest Euclidean norm among the phi(s) and zeta."""
        return float(max(np.linalg.norm(self.phi, axis=1).max(), np.linalg.norm(self.zeta)))

    def is_tabular(self) -> bool:
        n = self.n_states
        return self.dim >= n and np.array_equal(self.phi[:, :n], np.eye(n)) and not np.any(self.phi[:, n:])

    def check_gamma(self, gamma: float) -> None:
        if gamma < 1.0 and self.has_average:
            raise InvalidModelError("zeta must be zero when gamma < 1")

    def to_dict(self) -> dict:
        return {"dim": self.dim, "phi": self.phi.tolist(), "zeta": self.zeta.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureMap":
        fm = cls(np.asarray(data["phi"], float), np.asarray(data["zeta"], float))
        if fm.dim != int(data.get("dim", fm.dim)):
            raise InvalidModelError("declared dim does not match phi")
        return fm

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def tabular_features(n_states: int, gamma: float) -> FeatureMap:
    """One-hot value features, plus a separate average-reward coordinate when gamma = 1."""
    if gamma < 1.0:
        return FeatureMap(np.eye(n_states), np.zeros(n_states))
    phi = np.hstack([np.eye(n_states), np.zeros((n_states, 1))])
    zeta = np.zeros(n_states + 1)
    zeta[-1] = 1.0
    return FeatureMap(phi, zeta)


def anchored_features(n_states: int) -> FeatureMap:
    """One-hot features with the last state's value pinned to zero; its slot holds rbar."""
    phi = np.eye(n_states)
    phi[-1, -1] = 0.0
    zeta = np.zeros(n_states)
    zeta[-1] = 1.0
    return FeatureMap(phi, zeta)


def complement_basis(n: int) -> np.ndarray:
    """Orthonormal basis (n, n-1) of the vectors orthogonal to all-ones.

    Orthonormalizes e_i - 1/n in order; each column's first nonzero entry is positive.
    """
    if n == 1:
        return np.zeros((1, 0))
    raw = np.eye(n)[:, : n - 1] - 1.0 / n
    q, _ = np.linalg.qr(raw)
    for j in range(q.shape[1]):
        nz = np.flatnonzero(np.abs(q[:, j]) > 1e-12)
        if q[nz[0], j] < 0:
            q[:, j] = -q[:, j]
    return q


def orthonormal_features(n_states: int) -> FeatureMap:
    u = complement_basis(n_states)
    phi = np.hstack([u, np.zeros((n_states, 1))])
    zeta = np.zeros(n_states)
    zeta[-1] = 1.0
    return FeatureMap(phi, zeta)


def make_features(kind: str, n_states: int, gamma: float) -> FeatureMap:
    if kind == "tabular":
        return tabular_features(n_states, gamma)
    if gamma < 1.0:
        raise InvalidModelError(f"{kind} features are for the average-reward case (gamma = 1)")
    if kind == "anchored":
        return anchored_features(n_states)
    if kind == "orthonormal":
        return orthonormal_features(n_states)
    raise InvalidModelError(f"unknown feature kind {kind!r}")


def zeroed_last_column(kernel: np.ndarray) -> np.ndarray:
    """Kernel with transitions into the last state removed (its operator norm bounds the anchored case)."""
    out = np.array(kernel, dtype=float)
    out[:, -1] = 0.0
    return out


@dataclass(frozen=True)
class OracleMoments:
    xi: np.ndarray
    phi_next: np.ndarray


@dataclass(frozen=True, eq=False)
class LossModel:
    """Exact loss quantities for one (MDP, target, behavior, features) tuple.

    ``d_matrix`` is sum_s [phi phi^T - gamma phi phi_next^T] + zeta zeta^T.
    ``td0_jacobian`` is sum_s (phi + zeta)(phi + zeta - gamma phi_next)^T, the
    exact Jacobian of the TD(0) mean field.  The two coincide when zeta = 0.
    """

    mdp: Mdp
    target: Policy
    behavior: Policy
    features: FeatureMap
    mu_b: np.ndarray
    moments: OracleMoments
    w: np.ndarray
    hessian: np.ndarray
    d_matrix: np.ndarray
    td0_jacobian: np.ndarray
    theta_star: np.ndarray
    l_star: float

    @property
    def gamma(self) -> float:
        return self.mdp.gamma

    def delta(self, theta) -> np.ndarray:
        """Bellman residual delta(theta, s) for every state."""
        return self.moments.xi + self.w @ np.asarray(theta, float)

    def loss(self, theta) -> float:
        d = self.delta(theta)
        return float(0.5 * self.mu_b @ (d * d))

    def loss_gap(self, theta) -> float:
        return self.loss(theta) - self.l_star


def build_loss_model(
    mdp: Mdp,
    target: Policy,
    behavior: Policy,
    features: FeatureMap,
    require_realizable: bool = True,
) -> LossModel:
    features.check_gamma(mdp.gamma)
    if features.n_states != mdp.n_states:
        raise InvalidModelError("feature map and MDP disagree on the number of states")
    gamma = mdp.gamma
    mu_b = stationary_distribution(transition_kernel(mdp, behavior))
    phi, zeta = features.phi, features.zeta
    xi = policy_reward(mdp, target)
    phi_next = transition_kernel(mdp, target) @ phi
    w = -zeta[None, :] + gamma * phi_next - phi
    hessian = w.T @ (mu_b[:, None] * w)
    d_matrix = phi.T @ phi - gamma * phi.T @ phi_next + np.outer(zeta, zeta)
    lifted = phi + zeta[None, :]
    td0_jacobian = lifted.T @ (lifted - gamma * phi_next)
    rhs = -w.T @ (mu_b * xi)
    theta_star, *_ = np.linalg.lstsq(hessian, rhs, rcond=1e-12)
    delta = xi + w @ theta_star
    l_star = float(0.5 * mu_b @ (delta * delta))
    if require_realizable:
        worst = float(np.abs(delta[mu_b > 0]).max())
        scale = max(1.0, float(np.abs(xi).max()))
        if worst > 1e-8 * scale:
            raise NotRealizableError(
                f"features cannot represent the target's values: max Bellman residual {worst:.3g} at the least-squares solution"
            )
    moments = OracleMoments(xi, phi_next)
    for arr in (mu_b, xi, phi_next, w, hessian, d_matrix, td0_jacobian, theta_star):
        arr.setflags(write=False)
    return LossModel(
        mdp, target, behavior, features, mu_b, moments, w,
        hessian, d_matrix, td0_jacobian, theta_star, l_star,
    )


def loss_and_grad(model: LossModel, theta) -> tuple[float, np.ndarray]:
    delta = model.delta(theta)
    weighted = model.mu_b * delta
    return float(0.5 * weighted @ delta), model.w.T @ weighted


def min_sym_eig(matrix: np.ndarray) -> float:
    m = np.asarray(matrix, dtype=float)
    return float(np.linalg.eigvalsh(0.5 * (m + m.T))[0])


def contraction_constant(model: LossModel, rule_kind: str) -> float:
    """c with <theta - theta*, mean direction> >= c |theta - theta*|^2.

    Gradient rules use the smallest Hessian eigenvalue; TD(0) uses the
    symmetric part of its mean-field Jacobian.  The value may be <= 0.
    """
    if rule_kind in ("sgd", "direct_sgd", "td_sgd"):
        return min_sym_eig(model.hessian)
    if rule_kind == "td0":
        return min_sym_eig(model.td0_jacobian)
    raise ValueError(f"unknown rule kind {rule_kind!r}")
