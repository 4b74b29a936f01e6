"""Attack/defense sweeps over attack size and attacker knowledge."""

from __future__ import annotations

import csv
import io
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .attack import (
    GradientAscentConfig,
    PartialKnowledgeConfig,
    build_attack_plan,
    maximum_attack,
    random_attack,
    run_full_knowledge_attack,
    run_partial_knowledge_attack,
)
from .core import ModelKind, average_estimation_error
from .data import SyntheticConfig, generate_synthetic, load_observations
from .defense import MieConfig, MwaConfig, run_mie, run_mwa
from .truth_discovery import CrhConfig, GtmConfig, run_engine

log = logging.getLogger(__name__)

ATTACKS = ("none", "random", "maximum", "full_knowledge", "partial_knowledge")
DEFENSES = ("none", "MWA", "MIE")
INITS = ("equal", "uniform")

# targets and MWA groups used for the published datasets
DEFAULT_TARGETS = {"synthetic": 400, "emotion": 60, "weather": 100}
DEFAULT_GROUPS = {"synthetic": 5, "emotion": 4, "weather": 5}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    synthetic: dict | None = field(default_factory=dict)
    data_path: str | None = None
    schema: str = "generic"
    model: str = "CRH"
    attack: str = "full_knowledge"
    defense: str = "none"
    attack_fractions: list[float] = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.3])
    knowledge_fractions: list[float] = field(default_factory=lambda: [1.0])
    num_targets: int = 400
    min_observers: int = 10
    trials: int = 50
    base_seed: int = 0
    use_bootstrap: bool = True
    bootstrap_rounds: int = 500
    num_groups: int = 5
    mie_assumed_fraction: float | None = None
    mie_influence_domain: str = "all_items"
    server_init: str = "equal"
    attacker_init: str = "equal"
    server_init_range: list[float] = field(default_factory=lambda: [2.0, 3.0])
    attacker_init_range: list[float] = field(default_factory=lambda: [1.0, 3.0])
    crh: dict = field(default_factory=dict)
    gtm: dict = field(default_factory=dict)
    gradient_ascent: dict = field(default_factory=dict)
    jobs: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.data_path is None and self.synthetic is None:
            raise ConfigError("either a synthetic config or data_path is required")
        if self.model not in ("CRH", "GTM"):
            raise ConfigError(f"model must be CRH or GTM, got {self.model!r}")
        if self.attack not in ATTACKS:
            raise ConfigError(f"attack must be one of {ATTACKS}")
        if self.defense not in DEFENSES:
            raise ConfigError(f"defense must be one of {DEFENSES}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.attack_fractions or any(not 0 < a < 0.5 for a in self.attack_fractions):
            raise ConfigError("attack fractions must lie in (0, 0.5)")
        if not self.knowledge_fractions or any(not 0 < k <= 1 for k in self.knowledge_fractions):
            raise ConfigError("knowledge fractions must lie in (0, 1]")
        if self.server_init not in INITS or self.attacker_init not in INITS:
            raise ConfigError(f"init must be one of {INITS}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        try:
            CrhConfig(**self.crh)
            GtmConfig(**self.gtm)
            GradientAscentConfig(**self.gradient_ascent)
            SyntheticConfig(**(self.synthetic or {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return self

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**doc).validate()

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def sweep_knowledge(self) -> list[float]:
        return list(self.knowledge_fractions) if self.attack == "partial_knowledge" else [1.0]


@dataclass
class SweepResult:
    rows: list[dict]
    config: dict = field(default_factory=dict)

    ROW_FIELDS = ("attack_fraction", "knowledge_fraction", "trial", "seed",
                  "average_error", "error_std", "status")
    AGG_FIELDS = ("attack_fraction", "knowledge_fraction", "n_trials", "mean_error", "std_error")

    @property
    def aggregated(self) -> list[dict]:
        points: dict[tuple, list[float]] = {}
        for r in self.rows:
            key = (r["attack_fraction"], r["knowledge_fraction"])
            points.setdefault(key, [])
            if r["status"] == "ok":
                points[key].append(r["average_error"])
        out = []
        for (a, k), errs in points.items():
            arr = np.array(errs)
            out.append({"attack_fraction": a, "knowledge_fraction": k, "n_trials": len(errs),
                        "mean_error": float(arr.mean()) if len(arr) else float("nan"),
                        "std_error": float(arr.std()) if len(arr) else float("nan")})
        return out

    @property
    def failures(self) -> int:
        return sum(r["status"] != "ok" for r in self.rows)

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "rows": self.rows,
                           "aggregated": self.aggregated}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SweepResult":
        doc = json.loads(text)
        return cls([_typed_row(r) for r in doc["rows"]], doc.get("config", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        cols = ("kind",) + self.ROW_FIELDS + ("n_trials", "mean_error", "std_error")
        out.writerow(cols)
        for r in self.rows:
            out.writerow(["trial"] + [_cell(r[c]) for c in self.ROW_FIELDS] + ["", "", ""])
        for a in self.aggregated:
            out.writerow(["aggregate", _cell(a["attack_fraction"]), _cell(a["knowledge_fraction"]),
                          "", "", "", "", "", a["n_trials"], _cell(a["mean_error"]),
                          _cell(a["std_error"])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, config: dict | None = None) -> "SweepResult":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            if rec["kind"] == "trial":
                rows.append(_typed_row({c: rec[c] for c in cls.ROW_FIELDS}))
        return cls(rows, config or {})


def _cell(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _typed_row(r: dict) -> dict:
    return {"attack_fraction": float(r["attack_fraction"]),
            "knowledge_fraction": float(r["knowledge_fraction"]),
            "trial": int(r["trial"]), "seed": int(r["seed"]),
            "average_error": float(r["average_error"]),
            "error_std": float(r["error_std"]), "status": str(r["status"])}


# --------------------------------------------------------------------------- trials

def load_dataset(cfg: ExperimentConfig):
    if cfg.data_path is not None:
        return load_observations(cfg.data_path, cfg.schema)
    obs, _ = generate_synthetic(SyntheticConfig(**(cfg.synthetic or {})))
    return obs


def _engine_cfg(cfg: ExperimentConfig, init: str, lo_hi, n_workers: int, rng):
    base = CrhConfig(**cfg.crh) if cfg.model == "CRH" else GtmConfig(**cfg.gtm)
    if init == "equal":
        return base
    draws = rng.uniform(lo_hi[0], lo_hi[1], n_workers)
    if cfg.model == "CRH":
        return replace(base, initial_weight=draws)
    return replace(base, initial_variance=draws)


def run_trial(cfg: ExperimentConfig, obs, attack_fraction: float, knowledge_fraction: float,
              trial: int) -> dict:
    """One seeded plan -> attack -> (defense) -> evaluation pass."""
    seed = cfg.base_seed + trial
    row = {"attack_fraction": attack_fraction, "knowledge_fraction": knowledge_fraction,
           "trial": trial, "seed": seed, "average_error": float("nan"),
           "error_std": float("nan"), "status": "ok"}
    extras: dict[str, Any] = {}
    try:
        model = ModelKind(cfg.model)
        plan = build_attack_plan(obs, attack_fraction, cfg.num_targets, seed, cfg.min_observers)
        init_rng = np.random.default_rng([seed, 1])
        server = _engine_cfg(cfg, cfg.server_init, cfg.server_init_range,
                             plan.num_workers_total, init_rng)
        attacker = _engine_cfg(cfg, cfg.attacker_init, cfg.attacker_init_range,
                               plan.num_workers_total, init_rng)
        ga = GradientAscentConfig(**cfg.gradient_ascent)
        before = run_engine(obs, model, server)

        if cfg.attack == "none":
            mal = None
        elif cfg.attack == "random":
            mal = random_attack(plan, seed)
        elif cfg.attack == "maximum":
            mal = maximum_attack(plan)
        elif cfg.attack == "full_knowledge":
            mal = run_full_knowledge_attack(obs, plan, model, ga, attacker)
        else:
            pk = PartialKnowledgeConfig(knowledge_fraction, cfg.bootstrap_rounds,
                                        cfg.use_bootstrap, seed)
            mal = run_partial_knowledge_attack(obs, plan, pk, model, ga, attacker)
        poisoned = mal.inject(obs) if mal is not None else obs
        if mal is not None:
            extras["malicious"] = [(int(w), int(i), float(v))
                                   for w, i, v in zip(mal.workers, mal.items, mal.values)]

        if cfg.defense == "none":
            after = run_engine(poisoned, model, server)
        elif cfg.defense == "MWA":
            crh = CrhConfig(**cfg.crh)
            w0 = server.initial_weight if cfg.model == "CRH" else crh.initial_weight
            after = run_mwa(poisoned, MwaConfig(cfg.num_groups, crh.max_iterations,
                                                crh.tolerance, w0))
        else:
            frac = cfg.mie_assumed_fraction
            frac = attack_fraction if frac is None else frac
            res = run_mie(poisoned, MieConfig(frac, CrhConfig(**cfg.crh), cfg.mie_influence_domain))
            after = res.state
            extras["removed"] = sorted(res.removed.items())

        report = average_estimation_error(before, after, plan.targets)
        errs = np.array(list(report.per_item_error.values()))
        row["average_error"] = report.average_error
        row["error_std"] = float(errs.std())
    except Exception as exc:  # a failed trial is recorded, not fatal
        log.warning("trial %d at alpha=%s failed: %s", trial, attack_fraction, exc)
        log.debug("%s", traceback.format_exc())
        row["status"] = f"error: {type(exc).__name__}: {exc}"
    return {"row": row, "extras": extras}


def _trial_task(args):
    cfg_dict, a, k, t = args
    cfg = ExperimentConfig(**cfg_dict)
    return run_trial(cfg, _cached_dataset(cfg), a, k, t)


_DATASET_CACHE: dict[str, Any] = {}


def _cached_dataset(cfg: ExperimentConfig):
    key = json.dumps([cfg.synthetic, cfg.data_path, cfg.schema], sort_keys=True)
    if key not in _DATASET_CACHE:
        _DATASET_CACHE.clear()
        _DATASET_CACHE[key] = load_dataset(cfg)
    return _DATASET_CACHE[key]


def run_experiment(cfg: ExperimentConfig, return_extras: bool = False):
    """Run every (attack fraction, knowledge fraction, trial) combination.

    Trial ``t`` uses seed ``base_seed + t``; results are ordered by sweep point
    then trial regardless of ``jobs``.
    """
    cfg.validate()
    tasks = [(a, k, t) for a in cfg.attack_fractions for k in cfg.sweep_knowledge
             for t in range(cfg.trials)]
    if cfg.jobs == 1:
        obs = _cached_dataset(cfg)
        outputs = [run_trial(cfg, obs, a, k, t) for a, k, t in tasks]
    else:
        payload = [(cfg.to_dict(), a, k, t) for a, k, t in tasks]
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            outputs = list(pool.map(_trial_task, payload))
    result = SweepResult([o["row"] for o in outputs], cfg.to_dict())
    if return_extras:
        return result, [dict(o["extras"], **{k: o["row"][k] for k in
                                             ("attack_fraction", "knowledge_fraction", "trial")})
                        for o in outputs]
    return result


def emit_report(result: SweepResult, out_dir, formats=("csv", "json")) -> list[Path]:
    if not result.rows:
        raise ValueError("empty sweep result")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        p = out_dir / "result.csv"
        p.write_text(result.to_csv(), encoding="utf-8")
        written.append(p)
    if "json" in formats:
        p = out_dir / "result.json"
        p.write_text(result.to_json(), encoding="utf-8")
        written.append(p)
    return written


def write_extras(extras: list[dict], out_dir) -> list[Path]:
    """malicious_values.csv and (for MIE) removed_workers.csv."""
    out_dir = Path(out_dir)
    written = []
    key = ("attack_fraction", "knowledge_fraction", "trial")
    if any("malicious" in e for e in extras):
        p = out_dir / "malicious_values.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(key + ("worker_id", "item_id", "value", "is_malicious"))
            for e in extras:
                for wid, iid, v in e.get("malicious", []):
                    w.writerow([e[k] for k in key] + [wid, iid, format(v, ".17g"), 1])
        written.append(p)
    if any("removed" in e for e in extras):
        p = out_dir / "removed_workers.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(key + ("worker_id", "influence"))
            for e in extras:
                for wid, phi in e.get("removed", []):
                    w.writerow([e[k] for k in key] + [wid, format(phi, ".17g")])
        written.append(p)
    return written
