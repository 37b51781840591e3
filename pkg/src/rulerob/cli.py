"""Command-line surface: file-based, reproducible workflows.

Subcommands:
  monitor      evaluate named formulas over a recorded scenario
  mpr          dynamics-aware robustness of one predicate at one step
  gen-dataset  label scenario steps with exact pipeline robustness
  train-gp     fit the surrogate on a labeled dataset
  predict      surrogate robustness at one step
  plan         rule-aware trajectory planning
  eval         compare planned against recorded robustness per scenario
  relevance    feature relevance scores of a trained surrogate

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from rulerob import gpr, mpr, stl
from rulerob.config import ENV_CONFIG_PATH, RunConfig, load_config
from rulerob.errors import InputError, RulerobError
from rulerob.planner import (
    ExactScorer,
    GPScorer,
    plan_trajectory,
    recorded_rule_robustness,
)
from rulerob.predicates import SignalLeafEvaluator, make_registry
from rulerob.scenario import load_scenario, save_signal_csv

log = logging.getLogger("rulerob")


def _out_stream(path: str | None):
    return open(path, "w", newline="", encoding="utf-8") if path else sys.stdout


def _load_scenarios(directory: str) -> list[tuple[str, tuple]]:
    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        raise InputError(f"no scenario files (*.json) in {directory}")
    return [(p.stem, load_scenario(p)) for p in paths]


def _load_norms(path: str) -> dict[str, mpr.NormalizationConstants]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return {name: mpr.NormalizationConstants.from_dict(d) for name, d in raw.items()}


def _load_models(specs: list[str]) -> dict[str, gpr.GPModel]:
    models = {}
    for spec in specs:
        p = Path(spec)
        paths = sorted(p.glob("*.json")) if p.is_dir() else [p]
        if not paths:
            raise InputError(f"no model files found at {spec}")
        for path in paths:
            model = gpr.load_model(path)
            models[model.predicate_name] = model
    return models


def _calibration_instances(signal, pred, horizon: int):
    instances = []
    for k in range(len(signal) - horizon):
        b = mpr.nearest_other(signal.states[k]) if pred.arity == 2 else None
        if pred.arity == 2 and b is None:
            continue
        instances.append((signal, k, b))
    return instances


def _resample_signal(signal, dt_plan: float):
    from rulerob.scenario import Signal

    stride = round(dt_plan / signal.dt)
    if stride < 1 or abs(stride * signal.dt - dt_plan) > 1e-9:
        raise InputError(
            f"planner step {dt_plan}s is not an integer multiple of the signal step {signal.dt}s"
        )
    return Signal(signal.states[::stride], dt_plan)


def _build_scorer(args, cfg: RunConfig, registry, net, signal):
    if args.exact:
        from dataclasses import replace

        # the exact scorer runs on planned signals at the planning step size
        horizon = max(1, round(cfg.sampler.horizon * cfg.sampler.dt / cfg.planner.dt))
        mpr_cfg = replace(cfg.sampler, dt=cfg.planner.dt, horizon=horizon)
        norms = _load_norms(args.norms) if args.norms else {}
        if not args.norms:
            log.info("no calibration file given; auto-calibrating per predicate")
        resampled = _resample_signal(signal, cfg.planner.dt)
        for name in ("in_same_lane", "safe_distance", "no_unnecessary_braking", "speed_limit"):
            if name in norms:
                continue
            pred = registry[name]
            try:
                instances = _calibration_instances(resampled, pred, mpr_cfg.horizon)
                norms[name] = mpr.calibrate_normalization(
                    instances, pred, net, mpr_cfg, cfg.calibration_margin)
            except RulerobError:
                norms[name] = mpr.identity_normalization(cfg.calibration_margin)
        return ExactScorer(norms, registry, net, mpr_cfg)
    if not args.models:
        raise InputError("either --models or --exact is required")
    return GPScorer(_load_models(args.models), registry, net)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_monitor(args, cfg: RunConfig) -> int:
    net, signal = load_scenario(args.scenario)
    registry = make_registry(cfg.rules)
    rules = stl.load_rules(args.rules, registry.arities)
    k_from = args.k_from
    k_to = args.k_to if args.k_to is not None else len(signal) - 1
    if not 0 <= k_from <= k_to < len(signal):
        raise InputError(f"step range [{k_from}, {k_to}] outside signal of length {len(signal)}")
    leaves = SignalLeafEvaluator(registry, net, signal)
    with _out_stream(args.out) as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "formula", "characteristic", "rho_mf"])
        for k in range(k_from, k_to + 1):
            for name, phi in rules.items():
                c = stl.eval_characteristic(phi, leaves, k)
                rho = stl.eval_robustness(phi, leaves, k)
                writer.writerow([k, name, c, repr(rho)])
    return 0


def cmd_mpr(args, cfg: RunConfig) -> int:
    net, signal = load_scenario(args.scenario)
    registry = make_registry(cfg.rules)
    pred = registry[args.predicate]
    b = args.other
    if pred.arity == 2 and b is None:
        b = mpr.nearest_other(signal.states[args.step])
        if b is None:
            raise InputError("predicate needs another vehicle but the scenario has none")
    if args.norm:
        norm = _load_norms(args.norm).get(pred.name)
        if norm is None:
            raise InputError(f"{args.norm} has no constants for predicate {pred.name!r}")
    else:
        instances = _calibration_instances(signal, pred, cfg.sampler.horizon)
        norm = mpr.calibrate_normalization(instances, pred, net, cfg.sampler,
                                           cfg.calibration_margin)
    result = mpr.compute_mpr(pred, net, signal, args.step, cfg.sampler, norm, b)
    if args.save_norm:
        path = Path(args.save_norm)
        existing = _load_norms(path) if path.exists() else {}
        existing[pred.name] = norm
        path.write_text(json.dumps({k: v.to_dict() for k, v in existing.items()}), encoding="utf-8")
    payload = {
        "predicate": pred.name,
        "other": b,
        "step": args.step,
        "c": result.characteristic,
        "p_bar": result.p_bar,
        "rho_mp": result.rho,
        "sampleCount": result.n_samples,
    }
    with _out_stream(args.out) as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return 0


def cmd_gen_dataset(args, cfg: RunConfig) -> int:
    scenarios = [scn for _, scn in _load_scenarios(args.scenario_dir)]
    registry = make_registry(cfg.rules)
    pred = registry[args.predicate]
    n_p = args.n if args.n is not None else (
        cfg.gp.n_points_pair if pred.arity == 2 else cfg.gp.n_points_single
    )
    dataset = gpr.generate_dataset(scenarios, pred, cfg.sampler, n_p,
                                   seed=args.seed, margin=cfg.calibration_margin)
    gpr.save_dataset(dataset, args.out)
    log.info("dataset with %d instances written to %s", len(dataset), args.out)
    print(json.dumps({"predicate": pred.name, "n": len(dataset),
                      "satisfied": int((dataset.characteristics == 1).sum()),
                      "violated": int((dataset.characteristics == -1).sum())}))
    return 0


def cmd_train_gp(args, cfg: RunConfig) -> int:
    dataset = gpr.load_dataset(args.dataset)
    rng = np.random.default_rng(args.seed)
    n = len(dataset)
    n_holdout = max(1, int(round(cfg.gp.holdout_fraction * n))) if n > 4 else 0
    perm = rng.permutation(n)
    hold, train = perm[:n_holdout], perm[n_holdout:]
    model = gpr.train_gp(
        dataset.inputs[train], dataset.outputs[train],
        n_starts=cfg.gp.n_starts, max_iter=cfg.gp.max_iter, tol=cfg.gp.tol,
        seed=args.seed, predicate_name=dataset.predicate_name,
        feature_names=dataset.feature_names, norm=dataset.norm,
    )
    metadata = {"n_train": int(len(train)), "n_holdout": int(len(hold))}
    if n_holdout:
        mu, var = model.predict_batch(dataset.inputs[hold])
        rmse = float(np.sqrt(np.mean((mu - dataset.outputs[hold]) ** 2)))
        within = float(np.mean(np.abs(mu - dataset.outputs[hold]) <= 2 * np.sqrt(var)))
        metadata.update({"holdout_rmse": rmse, "holdout_2sigma_coverage": within})
        # final model conditions on all data with the selected hyperparameters
        model = gpr.GPModel.from_hyper(
            dataset.inputs, dataset.outputs, model.hyper,
            predicate_name=dataset.predicate_name,
            feature_names=dataset.feature_names, norm=dataset.norm,
        )
    model.metadata = metadata
    gpr.save_model(model, args.out)
    print(json.dumps(metadata))
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    model = gpr.load_model(args.model)
    net, signal = load_scenario(args.scenario)
    registry = make_registry(cfg.rules)
    pred = registry[model.predicate_name]
    b = args.other
    if pred.arity == 2 and b is None:
        b = mpr.nearest_other(signal.states[args.step])
        if b is None:
            raise InputError("predicate needs another vehicle but the scenario has none")
    rho, sigma = gpr.predict_robustness(model, registry, net, signal, args.step, b)
    c = 1 if pred.boolean(signal.states[args.step], net, b) else -1
    with _out_stream(args.out) as fh:
        json.dump({"predicate": model.predicate_name, "other": b, "step": args.step,
                   "rho_mp_predicted": rho, "sigma": sigma, "c": c}, fh, indent=2)
        fh.write("\n")
    return 0


def cmd_plan(args, cfg: RunConfig) -> int:
    net, signal = load_scenario(args.scenario)
    registry = make_registry(cfg.rules)
    scorer = _build_scorer(args, cfg, registry, net, signal)
    result = plan_trajectory(net, signal, args.step, cfg.planner, scorer, registry)
    prefix = args.out_prefix
    save_signal_csv(result.planned_signal, f"{prefix}_trajectory.csv")
    with open(f"{prefix}_profile.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "rule", "rho", "sigma"])
        for rule, (rho, sigma) in result.profiles.items():
            for k in range(len(rho)):
                writer.writerow([k, rule, repr(float(rho[k])), repr(float(sigma[k]))])
    breakdown = {
        "selected_index": result.index,
        "lambda_r": result.lambda_r,
        "j_p": float(result.j_p[result.index]),
        "j_r": float(result.j_r[result.index]),
        "total_cost": result.total_cost,
        "rule_values": result.rule_values,
        "n_candidates": int(len(result.j_p)),
        "n_collision_free": int(result.collision_free.sum()),
    }
    with open(f"{prefix}_costs.json", "w", encoding="utf-8") as fh:
        json.dump(breakdown, fh, indent=2)
        fh.write("\n")
    print(json.dumps(breakdown))
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    scenarios = _load_scenarios(args.scenario_dir)
    registry = make_registry(cfg.rules)
    rows = []
    for name, (net, signal) in scenarios:
        scorer = _build_scorer(args, cfg, registry, net, signal)
        result = plan_trajectory(net, signal, args.step, cfg.planner, scorer, registry)
        recorded, _ = recorded_rule_robustness(net, signal, args.step, cfg.planner,
                                               scorer, registry)
        planned_min = min(result.rule_values.values())
        recorded_min = min(recorded.values())
        row = {"scenario": name,
               "rho_recorded_min": recorded_min,
               "rho_planned_min": planned_min,
               "improved": int(planned_min > recorded_min)}
        for rule in sorted(recorded):
            row[f"recorded_{rule}"] = recorded[rule]
            row[f"planned_{rule}"] = result.rule_values[rule]
        rows.append(row)
    fieldnames = list(rows[0])
    with _out_stream(args.out) as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    improved = sum(r["improved"] for r in rows)
    log.info("planned beats recorded on %d of %d scenarios", improved, len(rows))
    return 0


def cmd_relevance(args, cfg: RunConfig) -> int:
    model = gpr.load_model(args.model)
    scores = gpr.feature_relevance(model)
    order = np.argsort(scores)[::-1]
    with _out_stream(args.out) as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "relevance"])
        for j in order:
            writer.writerow([model.feature_names[j], repr(float(scores[j]))])
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rulerob",
        description="Dynamics-aware robustness of traffic rules: monitoring, "
                    "surrogate learning, and rule-aware planning.",
    )
    parser.add_argument("--config", help=f"config file (YAML); default ${ENV_CONFIG_PATH}")
    parser.add_argument("--seed", type=int, default=0, help="seed for dataset subsampling")
    parser.add_argument("--jobs", type=int, default=1, help="parallelism hint")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("monitor", help="evaluate formulas over a recorded scenario")
    p.add_argument("scenario")
    p.add_argument("rules", help="rules file with 'name := formula' lines")
    p.add_argument("--from", dest="k_from", type=int, default=0)
    p.add_argument("--to", dest="k_to", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("mpr", help="dynamics-aware robustness of one predicate")
    p.add_argument("scenario")
    p.add_argument("--predicate", required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--other", help="other vehicle id (default: nearest)")
    p.add_argument("--norm", help="JSON file with calibration constants")
    p.add_argument("--save-norm", help="write/merge the constants used into this JSON file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_mpr)

    p = sub.add_parser("gen-dataset", help="label scenario steps with exact robustness")
    p.add_argument("scenario_dir")
    p.add_argument("--predicate", required=True)
    p.add_argument("--n", type=int, default=None, help="dataset size (default from config)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train-gp", help="fit the surrogate on a labeled dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_gp)

    p = sub.add_parser("predict", help="surrogate robustness at one step")
    p.add_argument("model")
    p.add_argument("scenario")
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--other")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("plan", help="rule-aware trajectory planning")
    p.add_argument("scenario")
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--models", action="append", default=[],
                   help="model file or directory (repeatable)")
    p.add_argument("--exact", action="store_true",
                   help="score leaves with the exact pipeline instead of the surrogate")
    p.add_argument("--norms", help="calibration constants JSON for --exact")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("eval", help="compare planned vs recorded robustness per scenario")
    p.add_argument("scenario_dir")
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--models", action="append", default=[])
    p.add_argument("--exact", action="store_true")
    p.add_argument("--norms")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("relevance", help="feature relevance of a trained surrogate")
    p.add_argument("model")
    p.add_argument("--out")
    p.set_defaults(func=cmd_relevance)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.jobs != 1:
            from dataclasses import replace
            cfg = replace(cfg, jobs=args.jobs)
        return args.func(args, cfg)
    except RulerobError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 2)


if __name__ == "__main__":
    sys.exit(main())
