"""Command-line driver: ``offpolicy-sgd {mdp-gen,evaluate,learn,rate-fit,verify}``.

Exit codes: 0 success, 1 a check failed, 2 invalid input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import verify
from .analysis import fit_records
from .config import ExperimentConfig, evaluation_setup, generate_mdp
from .engine import average_records, read_records, run, write_records
from .estimation import EmpiricalModel
from .features import NotRealizableError
from .mdp import ChainError, InvalidModelError, save_mdp, save_policy
from .policy_iteration import EvaluationDiverged, PolicyIterConfig, approximate_policy_iteration, schedule_from_spec
from .trajectory import make_rng, sample_trajectory

OK, CHECK_FAILED, INVALID_INPUT = 0, 1, 2


class CheckFailed(Exception):
    pass


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    if args.seeds:
        try:
            cfg.seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError as exc:
            raise InvalidModelError(f"--seeds must be comma-separated integers: {exc}") from exc
        cfg.check_fields()
    if args.out:
        cfg.out = args.out
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    if not cfg.out:
        raise InvalidModelError("no output directory: pass --out or set 'out' in the config")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


# ---------------------------------------------------------------------------
# subcommands


def cmd_mdp_gen(args) -> int:
    cfg = _load_config(args)
    spec = dict(cfg.mdp)
    for key in ("n_states", "n_actions", "gamma", "seed"):
        value = getattr(args, key)
        if value is not None:
            spec[key] = value
    if "path" in spec:
        raise InvalidModelError("mdp-gen needs a generator spec, not a path")
    mdp = generate_mdp(spec)
    if cfg.gamma is not None:
        mdp = mdp.with_gamma(cfg.gamma)
    out = _out_dir(cfg)
    save_mdp(mdp, out / "mdp.json")
    for name in ("target", "behavior"):
        save_policy(cfg.build_policy(getattr(cfg, name), mdp), out / f"{name}.json")
    _say(args, f"wrote {out / 'mdp.json'} ({mdp.n_states} states, {mdp.n_actions} actions, gamma={mdp.gamma})")
    return OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    setup = evaluation_setup(cfg)
    schedule_spec = cfg.schedule or {"variant": "contraction", "c": "auto"}
    schedule_from_spec(schedule_spec, setup.oracle, cfg.rule)  # validates before any run starts
    out = _out_dir(cfg)
    runs, summary = [], {"seeds": {}, "theta_star": setup.oracle.theta_star.tolist()}
    for seed in cfg.seeds:
        data = sample_trajectory(setup.mdp, setup.behavior, cfg.sampler_config(cfg.T, seed), make_rng(seed, 0))
        estimator = EmpiricalModel.for_mdp(setup.mdp) if cfg.mode == "empirical" else None
        result = run(
            setup.rule, data, schedule_from_spec(schedule_spec, setup.oracle, cfg.rule), setup.projection,
            setup.theta0, oracle=setup.oracle, estimator=estimator, cadence=cfg.cadence,
        )
        write_records(result.records, out / f"seed_{seed}.csv")
        runs.append(result.records)
        final = result.records[-1]
        summary["seeds"][str(seed)] = {
            "theta": result.theta.tolist(),
            "theta_bar": result.theta_bar.tolist(),
            "loss_gap": final.loss_gap,
            "dist_sq": final.dist_sq,
        }
        summary["meta"] = result.meta
        _say(args, f"seed {seed}: loss_gap={final.loss_gap:.3e} dist_sq={final.dist_sq:.3e}")
    write_records(average_records(runs), out / "mean.csv")
    _dump(summary, out / "summary.json")
    if not summary["meta"]["theta_star_feasible"]:
        print("warning: theta* lies outside the projection set", file=sys.stderr)
    return OK


def cmd_learn(args) -> int:
    cfg = _load_config(args)
    mdp = cfg.build_mdp()
    behavior = cfg.build_policy(cfg.behavior, mdp)
    initial = cfg.build_policy(cfg.initial_policy, mdp) if cfg.initial_policy is not None else None
    pset = cfg.build_projection() if cfg.projection is not None else None
    out = _out_dir(cfg)
    for seed in cfg.seeds:
        extra = {"schedule": cfg.schedule} if cfg.schedule is not None else {}
        pi_cfg = PolicyIterConfig(
            K=cfg.K, T_eval=cfg.T_eval, gamma=mdp.gamma, eval_rule=cfg.eval_rule, mode=cfg.mode,
            projection=pset, seed=seed, sampler_mode=cfg.sampler.get("mode", "markov"), initial_policy=initial,
            **extra,
        )
        report = approximate_policy_iteration(mdp, behavior, pi_cfg)
        report.write_csv(out / f"report_{seed}.csv")
        save_policy(report.final_policy, out / f"policy_{seed}.json")
        _dump(
            {
                "optimal_policy": report.pi_star.probs.tolist(),
                "final_is_optimal": bool(np.array_equal(report.final_policy.probs, report.pi_star.probs)),
                "diagnostics": report.diagnostics(),
                "rounds": [
                    {"k": r.k, "policy": r.policy.probs.tolist(), "suboptimality": r.suboptimality,
                     "eps_hat": r.eps_hat, "shift_c": r.shift_c}
                    for r in report.rounds
                ],
            },
            out / f"report_{seed}.json",
        )
        _say(args, f"seed {seed}: final suboptimality {report.rounds[-1].suboptimality:.3e}")
        for line in report.diagnostics():
            print(f"diagnostic: {line}", file=sys.stderr)
    return OK


def cmd_rate_fit(args) -> int:
    cfg = _load_config(args)
    paths = [Path(p) for p in args.records] or [cfg.resolve(p) for p in cfg.records]
    if not paths:
        raise InvalidModelError("no record files given")
    metric = args.metric or cfg.metric
    window = tuple(float(x) for x in (args.window.split(",") if args.window else cfg.window))
    if len(window) != 2 or not window[0] < window[1]:
        raise InvalidModelError("window must be two increasing numbers")
    fit = fit_records([read_records(p) for p in paths], metric, window)
    result = {"metric": metric, "slope": fit.slope, "intercept": fit.intercept, "window": list(fit.window),
              "n_points": fit.n_points, "n_seeds": fit.n_seeds}
    if cfg.out:
        _dump(result, _out_dir(cfg) / "rate_fit.json")
    _say(args, f"{metric}: slope {fit.slope:.4f} over t in [{window[0]:g}, {window[1]:g}] "
               f"({fit.n_points} points, {fit.n_seeds} runs)")
    if args.max_slope is not None and fit.slope > args.max_slope:
        raise CheckFailed(f"slope {fit.slope:.4f} exceeds the required {args.max_slope}")
    return OK


def cmd_verify(args) -> int:
    results = []
    for check in verify.all_checks():
        res = verify.explain(check())
        results.append(res)
        if not args.quiet or not res.passed:
            print(f"{'PASS' if res.passed else 'FAIL'}  {res.name}: {res.detail}", flush=True)
        if res.explanation:
            print(f"      why: {res.explanation}")
    for note in verify.NOTES:
        print(f"NOTE  {note}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return CHECK_FAILED if failed else OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seeds", help="comma-separated seeds, overrides the config")
    common.add_argument("--quiet", action="store_true", help="only print failures")

    parser = argparse.ArgumentParser(prog="offpolicy-sgd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("mdp-gen", parents=[common], help="write a generated MDP and its policies as JSON")
    gen.add_argument("--n-states", dest="n_states", type=int)
    gen.add_argument("--n-actions", dest="n_actions", type=int)
    gen.add_argument("--gamma", type=float)
    gen.add_argument("--seed", type=int)
    gen.set_defaults(func=cmd_mdp_gen)

    sub.add_parser("evaluate", parents=[common], help="offline policy evaluation runs").set_defaults(func=cmd_evaluate)
    sub.add_parser("learn", parents=[common], help="approximate policy iteration").set_defaults(func=cmd_learn)

    fit = sub.add_parser("rate-fit", parents=[common], help="fit log(mean metric) against log t")
    fit.add_argument("records", nargs="*", help="record CSV files (one per seed)")
    fit.add_argument("--metric", choices=("loss_gap", "dist_sq", "e_t"))
    fit.add_argument("--window", help="lo,hi")
    fit.add_argument("--max-slope", dest="max_slope", type=float, help="fail (exit 1) if the slope is larger")
    fit.set_defaults(func=cmd_rate_fit)

    sub.add_parser("verify", parents=[common], help="run the invariant checks").set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CheckFailed, EvaluationDiverged) as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return CHECK_FAILED
    except (InvalidModelError, ChainError, NotRealizableError, FileNotFoundError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return INVALID_INPUT


if __name__ == "__main__":
    sys.exit(main())
