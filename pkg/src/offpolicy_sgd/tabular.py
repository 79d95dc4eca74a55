"""Sparse tabular versions of the three update rules.

With one-hot features each step touches few coordinates: TD-SGD only
V(s_t), V(s_{t+1}) and rbar; TD(0) only V(s_t) and rbar.  Direct-SGD is
dense because the estimated next-state law spreads over all states.  These
loops operate on the value table directly and serve as an independent
check on the generic engine.
"""

from __future__ import annotations

import numpy as np

from .engine import ProjectionSet, StepSchedule, step_size
from .estimation import EmpiricalModel
from .features import LossModel
from .mdp import InvalidModelError, Policy


def sparse_tabular_run(
    kind: str,
    data,
    target: Policy,
    behavior: Policy,
    gamma: float,
    schedule: StepSchedule,
    pset: ProjectionSet,
    theta0,
    source: LossModel | EmpiricalModel,
) -> tuple[np.ndarray, np.ndarray]:
    """Run a tabular rule; returns (last iterate, average of iterates 0..T).

    The parameter layout matches ``tabular_features``: values first, then
    rbar when gamma = 1.  ``pset`` must be a box so coordinates can be
    clipped independently.  An EmpiricalModel ``source`` is updated in place.
    """
    if pset.shape != "box":
        raise InvalidModelError("sparse updates need a box projection")
    n = target.n_states
    average = gamma >= 1.0
    theta = np.array(theta0, dtype=float)
    if theta.shape != (n + int(average),):
        raise InvalidModelError("theta0 does not match the tabular layout")
    hw = np.broadcast_to(np.asarray(pset.half_width, float), theta.shape)
    v = theta[:n].copy()
    rbar = theta[n] if average else 0.0
    r_hw = hw[n] if average else 0.0
    v_sum = v.copy()
    r_sum = rbar
    empirical = isinstance(source, EmpiricalModel)
    b, pi = behavior.probs, target.probs
    if not empirical:
        kernel = np.einsum("sa,sat->st", pi, source.mdp.transition)
    t = 0
    for t, (s, a, r, sn) in enumerate(data, start=1):
        if empirical:
            source.update((s, a, r, sn))
        eta = step_size(schedule, t)
        if kind == "td0":
            mu = source.clamped_invariant(s) if empirical else source.mu_b[s]
            step = -(pi[s, a] / b[s, a]) / mu * (r - rbar + gamma * v[sn] - v[s])
            v[s] = min(max(v[s] - eta * step, -hw[s]), hw[s])
            if average:
                rbar = min(max(rbar - eta * step, -r_hw), r_hw)
        else:
            if empirical:
                p_hat = source.estimate_transition(target, s)
                xi = source.estimate_reward(target, s)
            else:
                p_hat = kernel[s]
                xi = source.moments.xi[s]
            delta = xi - rbar + gamma * (p_hat @ v) - v[s]
            if kind == "direct_sgd":
                v = v - (eta * delta * gamma) * p_hat
                v[s] += eta * delta
                np.clip(v, -hw[:n], hw[:n], out=v)
                if average:
                    rbar = min(max(rbar + eta * delta, -r_hw), r_hw)
            elif kind == "td_sgd":
                scaled = (pi[s, a] / b[s, a]) * delta
                if sn == s:
                    v[s] = min(max(v[s] + eta * scaled * (1.0 - gamma), -hw[s]), hw[s])
                else:
                    v[s] = min(max(v[s] + eta * scaled, -hw[s]), hw[s])
                    v[sn] = min(max(v[sn] - eta * scaled * gamma, -hw[sn]), hw[sn])
                if average:
                    rbar = min(max(rbar + eta * scaled, -r_hw), r_hw)
            else:
                raise InvalidModelError(f"unknown rule kind {kind!r}")
        v_sum += v
        r_sum += rbar
    last = np.concatenate([v, [rbar]]) if average else v
    mean = np.concatenate([v_sum, [r_sum]]) if average else v_sum
    return last, mean / (t + 1)

