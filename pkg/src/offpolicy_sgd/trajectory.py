"""Offline datasets generated by a behavior policy."""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .mdp import ChainError, InvalidModelError, Mdp, Policy, stationary_distribution, transition_kernel

HEADER_TAG = "#offline-v1"


class Transition(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int


def make_rng(seed: int, run_index: int = 0) -> np.random.Generator:
    """Independent stream for run ``run_index`` of a sweep seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(run_index)]))


@dataclass(frozen=True)
class SamplerConfig:
    """``initial_state`` is a state index, ``"stationary"`` or ``None`` (uniform draw)."""

    horizon: int
    mode: str = "markov"
    initial_state: int | str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("markov", "iid"):
            raise InvalidModelError(f"sampler mode must be 'markov' or 'iid', got {self.mode!r}")
        if int(self.horizon) < 1:
            raise InvalidModelError("horizon must be at least 1")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Column-stored transitions; iterating yields Transition tuples."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.s)

    def __iter__(self) -> Iterator[Transition]:
        for s, a, r, sn in zip(self.s.tolist(), self.a.tolist(), self.r.tolist(), self.s_next.tolist()):
            yield Transition(s, a, r, sn)

    def __getitem__(self, i: int) -> Transition:
        return Transition(int(self.s[i]), int(self.a[i]), float(self.r[i]), int(self.s_next[i]))

    def head(self, n: int) -> "Trajectory":
        return Trajectory(self.s[:n], self.a[:n], self.r[:n], self.s_next[:n], self.seed, dict(self.meta))


def _cumulative(probs: np.ndarray) -> list:
    cum = np.cumsum(probs, axis=-1)
    cum[..., -1] = 1.0
    return cum.tolist()


def sample_trajectory(
    mdp: Mdp,
    behavior: Policy,
    config: SamplerConfig,
    rng: np.random.Generator | None = None,
) -> Trajectory:
    """Draw ``config.horizon`` transitions under ``behavior``.

    In markov mode the states are chained (``s_next`` of one transition is
    ``s`` of the next); in iid mode every ``s`` is an independent draw from
    the behavior stationary distribution.
    """
    if behavior.probs.shape != (mdp.n_states, mdp.n_actions):
        raise InvalidModelError("behavior policy does not match the MDP dimensions")
    if rng is None:
        rng = make_rng(config.seed)
    n, T = mdp.n_states, int(config.horizon)
    cum_pi = _cumulative(behavior.probs)
    cum_next = _cumulative(mdp.transition)
    cum_rew = _cumulative(mdp.reward_probs)
    values = mdp.reward_values.tolist()
    n_a, n_r = mdp.n_actions, len(values)

    mu = None
    if config.mode == "iid" or config.initial_state == "stationary":
        try:
            mu = stationary_distribution(transition_kernel(mdp, behavior))
        except ChainError as exc:
            raise ChainError(f"iid sampling needs a unique stationary distribution: {exc}") from exc

    if config.initial_state is None:
        s = int(rng.integers(n))
        start = "uniform"
    elif config.initial_state == "stationary":
        s = int(rng.choice(n, p=mu))
        start = "stationary"
    else:
        s = int(config.initial_state)
        if not 0 <= s < n:
            raise InvalidModelError(f"initial state {s} out of range")
        start = "fixed"

    u = rng.random((T, 3)).tolist()
    if config.mode == "iid":
        states = rng.choice(n, size=T, p=mu)
        states[0] = s
        states = states.tolist()
    out_s = [0] * T
    out_a = [0] * T
    out_r = [0.0] * T
    out_n = [0] * T
    for t in range(T):
        if config.mode == "iid":
            s = states[t]
        ua, ur, un = u[t]
        a = min(bisect_right(cum_pi[s], ua), n_a - 1)
        ri = min(bisect_right(cum_rew[s][a], ur), n_r - 1)
        sn = min(bisect_right(cum_next[s][a], un), n - 1)
        out_s[t], out_a[t], out_r[t], out_n[t] = s, a, values[ri], sn
        s = sn
    return Trajectory(
        np.array(out_s, dtype=np.int64),
        np.array(out_a, dtype=np.int64),
        np.array(out_r, dtype=float),
        np.array(out_n, dtype=np.int64),
        seed=config.seed,
        meta={"mode": config.mode, "initial_state": start},
    )


def write_dataset(traj: Trajectory, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{HEADER_TAG},T={len(traj)},seed={traj.seed}\n")
        for z in traj:
            fh.write(f"{z.s},{z.a},{z.r!r},{z.s_next}\n")


def read_dataset(path: str | Path) -> Trajectory:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != HEADER_TAG:
            raise InvalidModelError(f"{path}: missing {HEADER_TAG} header")
        fields = dict(item.split("=", 1) for item in header[1:])
        rows = [line.split(",") for line in fh if line.strip()]
    if len(rows) != int(fields.get("T", len(rows))):
        raise InvalidModelError(f"{path}: header says T={fields['T']} but found {len(rows)} rows")
    cols = list(zip(*rows)) if rows else [(), (), (), ()]
    return Trajectory(
        np.array(cols[0], dtype=np.int64),
        np.array(cols[1], dtype=np.int64),
        np.array(cols[2], dtype=float),
        np.array(cols[3], dtype=np.int64),
        seed=int(fields.get("seed", 0)),
    )
