"""Experiment configuration: JSON documents turned into validated objects."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import ProjectionSet
from .features import FeatureMap, LossModel, build_loss_model, make_features
from .mdp import (
    InvalidModelError,
    Mdp,
    Policy,
    load_mdp,
    load_policy,
    random_mdp,
    random_policy,
    single_state_mdp,
    stay_or_swap_mdp,
    two_state_test_mdp,
)
from .trajectory import SamplerConfig, make_rng
from .updates import KINDS, MODES, UpdateRule

GENERATORS = ("random", "stay_or_swap", "two_state", "single_state")


@dataclass
class ExperimentConfig:
    """Everything a CLI run needs.

    ``mdp`` is ``{"path": ...}`` or ``{"generator": name, ...}``; policies are
    ``"uniform"``, ``{"random": seed}``, ``{"actions": [...]}``,
    ``{"probs": [[...]]}`` or ``{"path": ...}``.  Relative paths resolve
    against ``base_dir``.
    """

    mdp: dict
    target: object = "uniform"
    behavior: object = "uniform"
    gamma: float | None = None
    features: str = "tabular"
    rule: str = "td0"
    mode: str = "empirical"
    schedule: dict | None = None
    projection: dict | None = None
    T: int = 10_000
    seeds: list = field(default_factory=lambda: [0])
    sampler: dict = field(default_factory=dict)
    theta0: list | None = None
    cadence: float = 1.1
    out: str | None = None
    # policy iteration
    K: int = 10
    T_eval: int = 100_000
    eval_rule: str = "td0"
    initial_policy: object = None
    # rate fitting
    records: list = field(default_factory=list)
    metric: str = "loss_gap"
    window: list = field(default_factory=lambda: [1e3, 1e5])
    base_dir: str = "."

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path = ".") -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        unknown = set(data) - known
        if unknown:
            raise InvalidModelError(f"unknown config keys: {sorted(unknown)}")
        if "mdp" not in data:
            data = {**data, "mdp": {}}
        cfg = cls(**data, base_dir=str(base_dir))
        cfg.check_fields()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidModelError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidModelError("config must be a JSON object")
        return cls.from_dict(data, path.parent)

    def check_fields(self) -> None:
        if self.features not in ("tabular", "anchored", "orthonormal"):
            raise InvalidModelError(f"unknown feature kind {self.features!r}")
        for name in ("rule", "eval_rule"):
            if getattr(self, name) not in KINDS:
                raise InvalidModelError(f"{name} must be one of {KINDS}, got {getattr(self, name)!r}")
        if self.mode not in MODES:
            raise InvalidModelError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not isinstance(self.T, int) or self.T < 1:
            raise InvalidModelError("T must be a positive integer")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise InvalidModelError("seeds must be a non-empty list of non-negative integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise InvalidModelError("seeds must be distinct")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    # -- builders -------------------------------------------------------------

    def build_mdp(self) -> Mdp:
        spec = dict(self.mdp)
        if "path" in spec:
            mdp = load_mdp(self.resolve(spec["path"]))
        else:
            mdp = generate_mdp(spec)
        if self.gamma is not None and self.gamma != mdp.gamma:
            mdp = mdp.with_gamma(float(self.gamma))
        return mdp

    def build_policy(self, spec, mdp: Mdp) -> Policy:
        return policy_from_spec(spec, mdp, self.resolve)

    def build_features(self, mdp: Mdp) -> FeatureMap:
        return make_features(self.features, mdp.n_states, mdp.gamma)

    def build_projection(self, oracle: LossModel | None = None) -> ProjectionSet:
        spec = self.projection
        if spec is None:
            if oracle is None:
                raise InvalidModelError("projection must be given explicitly here")
            # a ball that contains theta* with room to spare
            return ProjectionSet.ball(2.0 * float(np.linalg.norm(oracle.theta_star)) + 1.0)
        shape = spec.get("shape")
        if shape == "ball":
            return ProjectionSet.ball(spec.get("radius"))
        if shape == "box":
            return ProjectionSet.box(np.asarray(spec.get("half_width"), dtype=float))
        raise InvalidModelError(f"projection shape must be 'ball' or 'box', got {shape!r}")

    def sampler_config(self, horizon: int, seed: int) -> SamplerConfig:
        unknown = set(self.sampler) - {"mode", "initial_state"}
        if unknown:
            raise InvalidModelError(f"unknown sampler keys: {sorted(unknown)}")
        return SamplerConfig(horizon, self.sampler.get("mode", "markov"), self.sampler.get("initial_state"), seed)


def generate_mdp(spec: dict) -> Mdp:
    spec = dict(spec)
    kind = spec.pop("generator", "random")
    try:
        if kind == "random":
            n_s, n_a = int(spec.pop("n_states", 5)), int(spec.pop("n_actions", 3))
            seed = int(spec.pop("seed", 0))
            gamma = float(spec.pop("gamma", 0.9))
            lo, hi = spec.pop("reward_range", (0.0, 1.0))
            levels = int(spec.pop("reward_levels", 2))
            if n_s < 1 or n_a < 1:
                raise InvalidModelError("n_states and n_actions must be positive")
            mdp = random_mdp(n_s, n_a, gamma, np.random.default_rng(seed), (float(lo), float(hi)), levels)
        elif kind == "stay_or_swap":
            mdp = stay_or_swap_mdp(float(spec.pop("gamma", 0.9)), tuple(spec.pop("rewards", (1.0, 0.0))))
        elif kind == "two_state":
            mdp = two_state_test_mdp(float(spec.pop("gamma", 0.5)), float(spec.pop("swap_prob", 0.2)))
        elif kind == "single_state":
            mdp = single_state_mdp(float(spec.pop("reward", 1.0)), float(spec.pop("gamma", 0.5)), int(spec.pop("n_actions", 1)))
        else:
            raise InvalidModelError(f"unknown MDP generator {kind!r}; expected one of {GENERATORS}")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InvalidModelError):
            raise
        raise InvalidModelError(f"bad {kind} generator parameters: {exc}") from exc
    if spec:
        raise InvalidModelError(f"unused {kind} generator keys: {sorted(spec)}")
    return mdp


def policy_from_spec(spec, mdp: Mdp, resolve=Path) -> Policy:
    n_s, n_a = mdp.n_states, mdp.n_actions
    if spec == "uniform":
        policy = Policy.uniform(n_s, n_a)
    elif isinstance(spec, dict) and len(spec) == 1:
        (key, value), = spec.items()
        if key == "random":
            policy = random_policy(n_s, n_a, make_rng(int(value), 1))
        elif key == "actions":
            policy = Policy.deterministic(np.asarray(value, dtype=int), n_a)
        elif key == "probs":
            policy = Policy(np.asarray(value, dtype=float))
        elif key == "path":
            policy = load_policy(resolve(value))
        else:
            raise InvalidModelError(f"unknown policy spec key {key!r}")
    else:
        raise InvalidModelError(f"cannot read policy spec {spec!r}")
    if policy.probs.shape != (n_s, n_a):
        raise InvalidModelError(f"policy shape {policy.probs.shape} does not match the MDP ({n_s}, {n_a})")
    return policy


@dataclass
class EvaluationSetup:
    mdp: Mdp
    target: Policy
    behavior: Policy
    features: FeatureMap
    oracle: LossModel
    rule: UpdateRule
    projection: ProjectionSet
    theta0: np.ndarray


def evaluation_setup(cfg: ExperimentConfig) -> EvaluationSetup:
    """Build and validate every object an evaluation run needs, before any sampling."""
    mdp = cfg.build_mdp()
    target = cfg.build_policy(cfg.target, mdp)
    behavior = cfg.build_policy(cfg.behavior, mdp)
    features = cfg.build_features(mdp)
    features.check_gamma(mdp.gamma)
    rule = UpdateRule(cfg.rule, target, behavior, features, mdp.gamma, cfg.mode)
    oracle = build_loss_model(mdp, target, behavior, features)
    pset = cfg.build_projection(oracle)
    theta0 = np.zeros(features.dim) if cfg.theta0 is None else np.asarray(cfg.theta0, dtype=float)
    if theta0.shape != (features.dim,):
        raise InvalidModelError(f"theta0 must have length {features.dim}")
    if not pset.contains(theta0):
        raise InvalidModelError("theta0 must lie in the projection set")
    cfg.sampler_config(cfg.T, cfg.seeds[0])
    return EvaluationSetup(mdp, target, behavior, features, oracle, rule, pset, theta0)
