"""Command-line entry point: ``crowdpoison <command> ...``.

Exit codes: 0 on success, 1 on configuration/input errors, 2 when a sweep
finished but some trials failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attack as atk
from .core import AggregationState, CrowdError, ModelKind, average_estimation_error
from .data import (
    SyntheticConfig,
    dataset_summary,
    export_ground_truth,
    export_observations,
    generate_synthetic,
    load_observations,
)
from .defense import MieConfig, MwaConfig, run_mie, run_mwa
from .experiment import ConfigError, ExperimentConfig, SweepResult, emit_report, run_experiment, write_extras
from .truth_discovery import CrhConfig, GtmConfig, run_engine

log = logging.getLogger("crowdpoison")


def _write_state(state: AggregationState, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "value"])
        for i, v in enumerate(state.values):
            if np.isfinite(v):
                w.writerow([i, format(float(v), ".17g")])
    rel = path.with_name(path.stem + "_reliability.csv")
    with open(rel, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["worker_id", "weight" if state.model_kind is ModelKind.CRH else "variance"])
        for u, r in enumerate(state.reliability):
            w.writerow([u, format(float(r), ".17g")])


def _read_values(path) -> dict[int, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {int(r["item_id"]): float(r["value"]) for r in csv.DictReader(fh)}


def _engine_cfg(args):
    if args.model == "CRH":
        return CrhConfig(max_iterations=args.max_iterations, tolerance=args.tolerance)
    return GtmConfig(max_iterations=args.max_iterations, tolerance=args.tolerance,
                     normalize=not args.no_normalize)


def _add_engine_flags(p):
    p.add_argument("--model", choices=["CRH", "GTM"], default="CRH")
    p.add_argument("--max-iterations", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--no-normalize", action="store_true", help="GTM: skip per-item z-scoring")


def cmd_generate(args) -> int:
    cfg = SyntheticConfig(args.workers, args.items, args.values, args.truth_low, args.truth_high,
                          args.sigma_low, args.sigma_high, args.seed)
    obs, truth = generate_synthetic(cfg)
    out = Path(args.out)
    export_observations(obs, out)
    export_ground_truth(truth, out.with_name(out.stem + "_truth.csv"),
                        out.with_name(out.stem + "_sigma.csv"))
    print(json.dumps(dataset_summary(obs)))
    return 0


def cmd_aggregate(args) -> int:
    obs = load_observations(args.input, args.schema)
    state = run_engine(obs, args.model, _engine_cfg(args))
    _write_state(state, Path(args.out))
    print(json.dumps({"iterations": state.iterations, "converged": state.converged,
                      **dataset_summary(obs)}))
    return 0


def cmd_attack(args) -> int:
    obs = load_observations(args.input, args.schema)
    plan = atk.build_attack_plan(obs, args.fraction, args.targets, args.seed, args.min_observers)
    engine = _engine_cfg(args)
    if args.attack == "random":
        mal = atk.random_attack(plan, args.seed)
    elif args.attack == "maximum":
        mal = atk.maximum_attack(plan)
    elif args.attack == "full_knowledge":
        mal = atk.run_full_knowledge_attack(obs, plan, args.model, engine_cfg=engine)
    else:
        pk = atk.PartialKnowledgeConfig(args.knowledge, args.bootstrap_rounds,
                                        not args.no_bootstrap, args.seed)
        mal = atk.run_partial_knowledge_attack(obs, plan, pk, args.model, engine_cfg=engine)
    out = Path(args.out)
    poisoned = mal.inject(obs)
    flags = np.r_[np.zeros(len(obs), bool), np.ones(len(mal), bool)]
    export_observations(poisoned, out, malicious=flags)
    plan_doc = {"attack_fraction": plan.attack_fraction, "targets": list(plan.targets),
                "malicious_pool": list(plan.malicious_pool),
                "per_item_attackers": {str(k): list(v) for k, v in plan.per_item_attackers.items()},
                "bounds": {str(k): list(v) for k, v in plan.bounds.items()},
                "rng_seed": plan.rng_seed}
    out.with_name(out.stem + "_plan.json").write_text(json.dumps(plan_doc, indent=2))
    print(json.dumps({"malicious_rows": len(mal), "targets": len(plan.targets)}))
    return 0


def cmd_defend(args) -> int:
    obs = load_observations(args.input, args.schema)
    if args.defense == "MWA":
        state = run_mwa(obs, MwaConfig(args.groups))
    else:
        res = run_mie(obs, MieConfig(args.assumed_fraction))
        state = res.state
        if args.removed:
            with open(args.removed, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["worker_id", "influence"])
                for u, phi in sorted(res.removed.items()):
                    w.writerow([u, format(phi, ".17g")])
        if res.unestimable:
            log.warning("items left without observers: %s", list(res.unestimable))
    _write_state(state, Path(args.out))
    return 0


def cmd_evaluate(args) -> int:
    before = _read_values(args.before)
    after = _read_values(args.after)
    if args.plan:
        targets = json.loads(Path(args.plan).read_text())["targets"]
    else:
        targets = [int(t) for t in args.targets.split(",")]
    report = average_estimation_error(before, after, targets,
                                      {"before": args.before, "after": args.after})
    print(report.to_json())
    return 0


def cmd_sweep(args) -> int:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.trials is not None:
        cfg.trials = args.trials
    cfg.validate()
    result, extras = run_experiment(cfg, return_extras=True)
    emit_report(result, args.out)
    write_extras(extras, args.out)
    for a in result.aggregated:
        print(f"alpha={a['attack_fraction']:.3f} knowledge={a['knowledge_fraction']:.2f} "
              f"mean={a['mean_error']:.4f} std={a['std_error']:.4f} n={a['n_trials']}")
    return 2 if result.failures else 0


def cmd_report(args) -> int:
    src = Path(args.input)
    text = src.read_text(encoding="utf-8")
    result = SweepResult.from_json(text) if src.suffix == ".json" else SweepResult.from_csv(text)
    emit_report(result, args.out, formats=(args.format,))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crowdpoison", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset and its ground truth")
    d = SyntheticConfig()
    g.add_argument("--workers", type=int, default=d.num_workers)
    g.add_argument("--items", type=int, default=d.num_items)
    g.add_argument("--values", type=int, default=d.num_values)
    g.add_argument("--truth-low", type=float, default=d.truth_low)
    g.add_argument("--truth-high", type=float, default=d.truth_high)
    g.add_argument("--sigma-low", type=float, default=d.sigma_low)
    g.add_argument("--sigma-high", type=float, default=d.sigma_high)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("aggregate", help="run CRH or GTM on an observation file")
    a.add_argument("--input", required=True)
    a.add_argument("--schema", choices=["generic", "emotion", "weather"], default="generic")
    _add_engine_flags(a)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_aggregate)

    t = sub.add_parser("attack", help="inject malicious workers into a dataset")
    t.add_argument("--input", required=True)
    t.add_argument("--schema", choices=["generic", "emotion", "weather"], default="generic")
    t.add_argument("--attack", choices=["random", "maximum", "full_knowledge",
                                        "partial_knowledge"], default="full_knowledge")
    _add_engine_flags(t)
    t.add_argument("--fraction", type=float, default=0.2)
    t.add_argument("--targets", type=int, default=400)
    t.add_argument("--min-observers", type=int, default=10)
    t.add_argument("--knowledge", type=float, default=1.0)
    t.add_argument("--bootstrap-rounds", type=int, default=500)
    t.add_argument("--no-bootstrap", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="poisoned dataset (CSV with is_malicious)")
    t.set_defaults(func=cmd_attack)

    f = sub.add_parser("defend", help="aggregate with MWA or MIE")
    f.add_argument("--input", required=True)
    f.add_argument("--schema", choices=["generic", "emotion", "weather"], default="generic")
    f.add_argument("--defense", choices=["MWA", "MIE"], default="MWA")
    f.add_argument("--groups", type=int, default=5)
    f.add_argument("--assumed-fraction", type=float, default=0.2)
    f.add_argument("--removed", help="MIE: write removed workers and influence scores here")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_defend)

    e = sub.add_parser("evaluate", help="average squared shift on targeted items")
    e.add_argument("--before", required=True)
    e.add_argument("--after", required=True)
    grp = e.add_mutually_exclusive_group(required=True)
    grp.add_argument("--plan", help="plan JSON written by `attack`")
    grp.add_argument("--targets", help="comma-separated item ids")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="run a configured experiment sweep",
                       description="Every ExperimentConfig field may be set in the JSON "
                                   "config file; --jobs and --trials override it.")
    s.add_argument("--config", help="JSON experiment config")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--jobs", type=int)
    s.add_argument("--trials", type=int)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="convert a sweep result between CSV and JSON")
    r.add_argument("--input", required=True)
    r.add_argument("--format", choices=["csv", "json"], default="csv")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CrowdError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
