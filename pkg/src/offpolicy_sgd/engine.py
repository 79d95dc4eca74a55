"""Projected stochastic iteration with Polyak averaging and metric capture."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .estimation import EmpiricalModel
from .features import LossModel
from .mdp import InvalidModelError
from .updates import UpdateRule, direction


@dataclass(eq=False)
class StepSchedule:
    """Step sizes eta_t for t >= 1.

    ``inverse_sqrt``: eta0 / sqrt(t).
    ``contraction``: eta_1 in [1/c, 2/c] (default 2/c) and
    eta_{t+1} = exp(-c eta_t / 2) eta_t, which keeps 1/(ct) <= eta_t <= 2/(ct).
    """

    variant: str
    eta0: float = 1.0
    c: float | None = None
    eta1: float | None = None
    _cache: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.variant == "inverse_sqrt":
            if not self.eta0 > 0:
                raise InvalidModelError("inverse_sqrt schedule needs eta0 > 0")
        elif self.variant == "contraction":
            if self.c is None or not self.c > 0:
                raise InvalidModelError(f"contraction schedule needs c > 0, got {self.c}")
            if self.eta1 is None:
                self.eta1 = 2.0 / self.c
            if not (1.0 / self.c <= self.eta1 <= 2.0 / self.c):
                raise InvalidModelError(f"eta1 must lie in [1/c, 2/c] = [{1 / self.c}, {2 / self.c}]")
            self._cache = [float(self.eta1)]
        else:
            raise InvalidModelError(f"unknown schedule variant {self.variant!r}")

    @classmethod
    def inverse_sqrt(cls, eta0: float = 1.0) -> "StepSchedule":
        return cls("inverse_sqrt", eta0=eta0)

    @classmethod
    def contraction(cls, c: float, eta1: float | None = None) -> "StepSchedule":
        return cls("contraction", c=c, eta1=eta1)

    def __iter__(self) -> Iterator[float]:
        """eta_1, eta_2, ... without touching the cache."""
        if self.variant == "inverse_sqrt":
            t = 1
            while True:
                yield self.eta0 / math.sqrt(t)
                t += 1
        eta, half_c = float(self.eta1), 0.5 * self.c
        while True:
            yield eta
            eta = math.exp(-half_c * eta) * eta

    def to_dict(self) -> dict:
        if self.variant == "inverse_sqrt":
            return {"variant": self.variant, "eta0": self.eta0}
        return {"variant": self.variant, "c": self.c, "eta1": self.eta1}


def step_size(schedule: StepSchedule, t: int) -> float:
    if t < 1:
        raise ValueError("step sizes are defined for t >= 1")
    if schedule.variant == "inverse_sqrt":
        return schedule.eta0 / math.sqrt(t)
    cache, half_c = schedule._cache, 0.5 * schedule.c
    while len(cache) < t:
        eta = cache[-1]
        cache.append(math.exp(-half_c * eta) * eta)
    return cache[t - 1]


@dataclass(frozen=True)
class ProjectionSet:
    """Ball of ``radius`` or box with per-coordinate ``half_width``, both centred at 0."""

    shape: str
    radius: float | None = None
    half_width: float | np.ndarray | None = None

    def __post_init__(self):
        if self.shape == "ball":
            if self.radius is None or not self.radius > 0:
                raise InvalidModelError("ball projection needs a positive radius")
        elif self.shape == "box":
            hw = np.asarray(self.half_width, dtype=float)
            if self.half_width is None or np.any(hw <= 0):
                raise InvalidModelError("box projection needs positive half widths")
        else:
            raise InvalidModelError(f"unknown projection shape {self.shape!r}")

    @classmethod
    def ball(cls, radius: float) -> "ProjectionSet":
        return cls("ball", radius=float(radius))

    @classmethod
    def box(cls, half_width) -> "ProjectionSet":
        return cls("box", half_width=half_width)

    def contains(self, theta, tol: float = 1e-12) -> bool:
        theta = np.asarray(theta, float)
        if self.shape == "ball":
            return bool(np.linalg.norm(theta) <= self.radius * (1 + tol))
        return bool(np.all(np.abs(theta) <= np.asarray(self.half_width) * (1 + tol)))

    def outer_radius(self, dim: int) -> float:
        """Radius of the smallest centred ball containing the set."""
        if self.shape == "ball":
            return self.radius
        return float(np.linalg.norm(np.broadcast_to(np.asarray(self.half_width, float), (dim,))))

    def to_dict(self) -> dict:
        if self.shape == "ball":
            return {"shape": "ball", "radius": self.radius}
        hw = np.asarray(self.half_width, float)
        return {"shape": "box", "half_width": hw.tolist()}


def project(pset: ProjectionSet, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if pset.shape == "ball":
        norm = math.sqrt(theta @ theta)
        if norm > pset.radius:
            return theta * (pset.radius / norm)
        return theta
    hw = pset.half_width
    return np.minimum(np.maximum(theta, -hw), hw)


@dataclass(frozen=True)
class RunRecord:
    t: int
    eta: float
    loss_gap: float | None = None
    dist_sq: float | None = None
    e_t: float | None = None


@dataclass(eq=False)
class RunResult:
    theta: np.ndarray
    theta_bar: np.ndarray
    records: list[RunRecord]
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        # allows ``theta_T, theta_bar_T, records = run(...)``
        return iter((self.theta, self.theta_bar, self.records))


def record_times(horizon: int, ratio: float = 1.1) -> list[int]:
    """Rounded powers of ``ratio`` up to ``horizon``, plus ``horizon`` itself."""
    times, k = set(), 0
    while True:
        t = int(round(ratio**k))
        if t > horizon:
            break
        times.add(t)
        k += 1
    if horizon >= 1:
        times.add(horizon)
    return sorted(times)


def run(
    rule: UpdateRule,
    data: Iterable,
    schedule: StepSchedule,
    pset: ProjectionSet,
    theta0,
    oracle: LossModel | None = None,
    estimator: EmpiricalModel | None = None,
    cadence: float = 1.1,
) -> RunResult:
    """Projected iteration theta_t = P(theta_{t-1} - eta_t g_t(theta_{t-1}, z_t)).

    Returns the last iterate, the average of theta_0..theta_T and the
    records.  With an oracle, ``meta["theta_star_feasible"]`` tells whether
    theta* lies in the projection set.  In empirical mode the estimator sees z_t before g_t is
    computed.  Loss and distance metrics need ``oracle``; the direction
    error e_t additionally needs empirical mode.
    """
    theta = np.array(theta0, dtype=float)
    if theta.shape != (rule.features.dim,):
        raise InvalidModelError(f"theta0 must have length {rule.features.dim}")
    if not pset.contains(theta):
        raise InvalidModelError("theta0 must lie in the projection set")
    if rule.mode == "empirical":
        if estimator is None:
            if oracle is None:
                raise InvalidModelError("empirical mode needs an EmpiricalModel (or an oracle to size one)")
            estimator = EmpiricalModel.for_mdp(oracle.mdp)
        source = estimator
    else:
        if oracle is None:
            raise InvalidModelError("oracle mode needs the exact LossModel")
        source = oracle
    oracle_rule = rule.with_mode("oracle") if (oracle is not None and rule.mode == "empirical") else None

    n = len(data) if hasattr(data, "__len__") else None
    pending = iter(record_times(n, cadence)) if n else None
    next_t = next(pending, None) if pending else None

    total = theta.copy()
    records: list[RunRecord] = []
    etas = iter(schedule)
    update = estimator.update if rule.mode == "empirical" else None
    t = 0
    for t, z in enumerate(data, start=1):
        if update is not None:
            update(z)
        g = direction(rule, theta, z, source)
        eta = next(etas)
        theta = project(pset, theta - eta * g)
        total += theta
        if pending is None or t == next_t:
            records.append(_record(t, eta, theta, total, z, rule, oracle_rule, source, oracle))
            if pending is not None:
                next_t = next(pending, None)
    if pending is None and records and records[-1].t != t:
        records.append(_record(t, eta, theta, total, z, rule, oracle_rule, source, oracle))
    meta = {"T": t, "schedule": schedule.to_dict(), "projection": pset.to_dict(), "rule": rule.kind, "mode": rule.mode}
    if estimator is not None:
        meta["occupancy_floor"] = estimator.occupancy_floor()
    if oracle is not None:
        # the convergence guarantees assume theta* in C; runs outside that premise are flagged
        meta["theta_star_feasible"] = pset.contains(oracle.theta_star, tol=1e-9)
    return RunResult(theta, total / (t + 1), records, meta)


def _record(t, eta, theta, total, z, rule, oracle_rule, source, oracle) -> RunRecord:
    if oracle is None:
        return RunRecord(t, eta)
    theta_bar = total / (t + 1)
    diff = theta - oracle.theta_star
    e_t = None
    if oracle_rule is not None:
        e_t = float(np.linalg.norm(direction(rule, theta, z, source) - direction(oracle_rule, theta, z, oracle)))
    return RunRecord(t, eta, oracle.loss_gap(theta_bar), float(diff @ diff), e_t)


# ---------------------------------------------------------------------------
# record files

RECORD_FIELDS = ("t", "eta", "loss_gap", "dist_sq", "e_t")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x)) if not isinstance(x, int) else str(x)


def write_records(records: list[RunRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(RECORD_FIELDS) + "\n")
        for rec in records:
            fh.write(",".join(_fmt(getattr(rec, f)) for f in RECORD_FIELDS) + "\n")


def read_records(path: str | Path) -> list[RunRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {k: (float(v) if v != "" else None) for k, v in row.items() if k != "t"}
            out.append(RunRecord(int(row["t"]), **vals))
    return out


def average_records(runs: list[list[RunRecord]]) -> list[RunRecord]:
    """Arithmetic mean across seeds at each recorded t (runs must share their t grid)."""
    if not runs:
        return []
    grid = [r.t for r in runs[0]]
    for other in runs[1:]:
        if [r.t for r in other] != grid:
            raise ValueError("runs were recorded on different t grids")
    out = []
    for i, t in enumerate(grid):
        row = {}
        for f in RECORD_FIELDS[1:]:
            vals = [getattr(run_[i], f) for run_ in runs]
            row[f] = None if any(v is None for v in vals) else float(np.mean(vals))
        out.append(RunRecord(t, **row))
    return out
