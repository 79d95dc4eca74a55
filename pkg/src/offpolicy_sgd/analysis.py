"""Rate fitting and the closed-form inequalities used as numerical checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import RunRecord, average_records
from .features import LossModel, min_sym_eig, zeroed_last_column
from .mdp import analyze_chain, exact_values, shift_constants, transition_kernel

DEFAULT_WINDOW = (1e3, 1e5)


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    window: tuple[float, float]
    n_points: int
    n_seeds: int = 1


def fit_rate(t, values, window=DEFAULT_WINDOW, n_seeds: int = 1) -> RateFit:
    """Least-squares line through (log t, log value) for t inside ``window``."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    lo, hi = window
    keep = (t >= lo) & (t <= hi)
    if keep.sum() < 5:
        raise ValueError(f"window [{lo:g}, {hi:g}] holds {int(keep.sum())} points; need at least 5")
    if np.any(~np.isfinite(v[keep])) or np.any(v[keep] <= 0):
        raise ValueError("metric must be positive and finite inside the window")
    slope, intercept = np.polyfit(np.log(t[keep]), np.log(v[keep]), 1)
    return RateFit(float(slope), float(intercept), (float(lo), float(hi)), int(keep.sum()), n_seeds)


def fit_records(runs, metric: str, window=DEFAULT_WINDOW) -> RateFit:
    """Fit the seed-averaged ``metric`` of one run (list of records) or several runs."""
    if runs and isinstance(runs[0], RunRecord):
        runs = [runs]
    mean = average_records(list(runs))
    t = [r.t for r in mean]
    vals = [getattr(r, metric) for r in mean]
    if any(v is None for v in vals):
        raise ValueError(f"metric {metric!r} is missing from the records")
    return fit_rate(t, vals, window, n_seeds=len(runs))


# ---------------------------------------------------------------------------
# value error versus loss gap


@dataclass(frozen=True)
class ValueErrorCheck:
    value_error: float
    loss_gap: float
    factor: float

    @property
    def bound(self) -> float:
        return self.factor * self.loss_gap

    @property
    def slack(self) -> float:
        return self.bound - self.value_error


def value_error(model: LossModel, theta) -> float:
    """mu^pi-weighted squared value error; for gamma = 1 the bias is compared up to a constant
    and the squared average-reward error is added."""
    mdp, target, fm = model.mdp, model.target, model.features
    mu_pi = analyze_chain(transition_kernel(mdp, target)).stationary
    exact = exact_values(mdp, target)
    v_theta = fm.values(theta)
    if mdp.gamma < 1.0:
        return float(mu_pi @ (exact.discounted_value - v_theta) ** 2)
    diff = v_theta - exact.bias
    diff = diff - mu_pi @ diff
    return float(mu_pi @ diff**2 + (exact.average_reward - fm.average_reward(theta)) ** 2)


def value_error_factor(model: LossModel, multiplier: float = 2.0, corrected: bool = False) -> float:
    """multiplier * C / (1 - gamma (1 - lambda))^2, with C the measure ratio and lambda the spectral gap.

    With ``corrected`` and gamma < 1 the denominator becomes (1 - gamma)^2.
    """
    gamma = model.gamma
    lam = analyze_chain(transition_kernel(model.mdp, model.target)).spectral_gap
    c = shift_constants(model.mdp, model.target, model.behavior).measure_ratio_c
    rate = (1.0 - gamma) if (corrected and gamma < 1.0) else (1.0 - gamma * (1.0 - lam))
    if rate <= 0:
        return float("inf")
    return multiplier * c / rate**2


def value_error_check(model: LossModel, theta, multiplier: float = 2.0, corrected: bool = False) -> ValueErrorCheck:
    return ValueErrorCheck(
        value_error(model, theta),
        model.loss_gap(theta),
        value_error_factor(model, multiplier, corrected),
    )


# ---------------------------------------------------------------------------
# curvature bounds


@dataclass(frozen=True)
class SpectrumCheck:
    name: str
    value: float
    bound: float

    @property
    def slack(self) -> float:
        return self.value - self.bound


def spectrum_checks(model: LossModel, kind: str) -> list[SpectrumCheck]:
    """Smallest eigenvalues of H and sym(D) next to their closed-form lower bounds.

    ``kind`` is ``tabular`` (gamma < 1), ``anchored`` or ``orthonormal``
    (gamma = 1).  ``d_matrix`` is the displayed D; the TD(0) Jacobian is
    reported separately under the same bound.
    """
    mdp, target = model.mdp, model.target
    kernel = transition_kernel(mdp, target)
    mu_min = float(model.mu_b.min())
    h_min = min_sym_eig(model.hessian)
    d_min = min_sym_eig(model.d_matrix)
    j_min = min_sym_eig(model.td0_jacobian)
    if kind == "tabular":
        gap = 1.0 - mdp.gamma
    elif kind == "anchored":
        gap = 1.0 - float(np.linalg.norm(zeroed_last_column(kernel), 2))
    elif kind == "orthonormal":
        gap = analyze_chain(kernel).spectral_gap
    else:
        raise ValueError(f"unknown feature kind {kind!r}")
    return [
        SpectrumCheck("hessian", h_min, mu_min * gap**2),
        SpectrumCheck("d_matrix", d_min, gap),
        SpectrumCheck("td0_jacobian", j_min, gap),
    ]
