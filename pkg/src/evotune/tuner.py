"""Campaign orchestration: binds GA chromosomes to capped training runs,
derives per-evaluation seeds, runs baseline-vs-tuned comparisons, and persists
every ledger as deterministic CSV.

Evaluation seeds are a hash of (campaign seed, chromosome bits), so fitness
values do not depend on worker count or scheduling order.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ga
from .agent import (TrainSchedule, TrainingTrace, EpochRecord, train_until,
                    write_trace_csv, CONSECUTIVE_PERFECT)
from .hyperparams import GENE_ORDER, Hyperparameters

log = logging.getLogger(__name__)

PINNED_LEARNING_RATE = 0.001  # both learning rates in consecutive-perfect mode

COMPARISON_HEADER = [
    "name", "gamma", "tau", "alpha_critic", "alpha_actor", "epsilon", "eta",
    "runs", "reached_runs", "mean_epochs", "median_epochs",
    "mean_episodes", "median_episodes", "mean_steps", "median_steps",
    "mean_wall_s", "median_wall_s",
]


@dataclass(frozen=True)
class CampaignConfig:
    env: str
    ga: ga.GaConfig = field(default_factory=ga.GaConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    workers: int = 1
    out_dir: str = "runs/tune"
    gene_mask: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        for name in self.gene_mask:
            if name not in GENE_ORDER:
                raise ValueError(f"gene mask names one of {GENE_ORDER}, got {name!r}")

    def effective_mask(self) -> dict[str, float]:
        """The configured mask, plus pinned learning rates in
        consecutive-perfect mode (the arm-task convention)."""
        mask = dict(self.gene_mask)
        if self.schedule.success_rule == CONSECUTIVE_PERFECT:
            mask.setdefault("alpha_actor", PINNED_LEARNING_RATE)
            mask.setdefault("alpha_critic", PINNED_LEARNING_RATE)
        return mask


def apply_mask(hp: Hyperparameters, mask: dict[str, float]) -> Hyperparameters:
    return replace(hp, **mask) if mask else hp


def derive_eval_seed(campaign_seed: int, chromosome: str) -> int:
    """Stable 63-bit seed from (campaign seed, chromosome bits)."""
    digest = hashlib.sha256(f"{campaign_seed}:{chromosome}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def evaluate_chromosome(
    chromosome: str,
    config: CampaignConfig,
) -> tuple[ga.EvalOutcome, list[EpochRecord]]:
    """Train once with the decoded (and masked) hyperparameters; fitness is
    1/epochs on success and 0 when the budget is exhausted or training fails."""
    hp = apply_mask(ga.decode(chromosome), config.effective_mask())
    seed = derive_eval_seed(config.ga.seed, chromosome)
    t0 = time.perf_counter()
    trace = train_until(config.env, hp, config.schedule, seed)
    wall = time.perf_counter() - t0
    if trace.failed:
        log.warning("evaluation failed numerically for chromosome %s; fitness 0",
                    ga.chromosome_hex(chromosome))
    if trace.outcome == "reached":
        assert trace.epochs_to_success is not None
        outcome = ga.EvalOutcome(fitness=1.0 / trace.epochs_to_success,
                                 epochs=trace.epochs_to_success, wall_s=wall)
    else:
        outcome = ga.EvalOutcome(fitness=0.0, epochs=len(trace.records), wall_s=wall)
    return outcome, trace.records


def fitness_of(chromosome: str, config: CampaignConfig) -> float:
    outcome, _ = evaluate_chromosome(chromosome, config)
    return outcome.fitness


def _worker(args: tuple[str, CampaignConfig]) -> tuple[ga.EvalOutcome, list[EpochRecord]]:
    return evaluate_chromosome(*args)


@dataclass
class CampaignResult:
    best_chromosome: str
    best_hp: Hyperparameters
    best_fitness: float
    log: list[ga.GaLogRecord]
    out_dir: Path


def run_campaign(config: CampaignConfig) -> CampaignResult:
    """Run (or resume) a tuning campaign, persisting ga_log.csv, best.json,
    and one trace CSV per evaluation under the output directory."""
    out = Path(config.out_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    log_path = out / "ga_log.csv"

    cache = ga.FitnessCache()
    if log_path.exists():
        for rec in ga.read_ga_log(log_path):
            cache.put(rec.chromosome, ga.EvalOutcome(rec.fitness, rec.epochs, rec.wall_s))
        log.info("resuming campaign: %d cached evaluations", len(cache))

    pool = ProcessPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    traces: dict[str, list[EpochRecord]] = {}
    timings: list[tuple[int, str, float]] = []

    def batch_eval(pending: list[str]) -> list[ga.EvalOutcome]:
        tasks = [(bits, config) for bits in pending]
        outcomes: list[ga.EvalOutcome] = []
        if pool is None:
            results = []
            for task in tasks:
                try:
                    results.append(_worker(task))
                except Exception:  # retry once, then score zero
                    log.exception("evaluation crashed; retrying once")
                    try:
                        results.append(_worker(task))
                    except Exception:
                        log.exception("evaluation crashed twice; scoring 0")
                        results.append((ga.EvalOutcome(0.0), []))
        else:
            futures = [pool.submit(_worker, task) for task in tasks]
            results = []
            for task, fut in zip(tasks, futures):
                try:
                    results.append(fut.result())
                except Exception:
                    log.exception("evaluation crashed; retrying once")
                    try:
                        results.append(pool.submit(_worker, task).result())
                    except Exception:
                        log.exception("evaluation crashed twice; scoring 0")
                        results.append((ga.EvalOutcome(0.0), []))
        for bits, (outcome, records) in zip(pending, results):
            traces[bits] = records
            outcomes.append(outcome)
        return outcomes

    new_header = not log_path.exists()
    with open(log_path, "a", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new_header:
            writer.writerow(ga.GA_LOG_HEADER)

        def on_eval(record: ga.GaLogRecord) -> None:
            writer.writerow(ga.ga_log_row(record))
            fh.flush()
            write_trace_csv(traces.get(record.chromosome, []),
                            out / "traces" / f"eval_{record.eval_index}.csv")
            timings.append((record.eval_index, ga.chromosome_hex(record.chromosome),
                            record.wall_s))

        try:
            best, run_log = ga.evolve(lambda bits: fitness_of(bits, config), config.ga,
                                      batch_eval=batch_eval, cache=cache, on_eval=on_eval)
        finally:
            if pool is not None:
                pool.shutdown()

    # measured timings live outside the byte-reproducible CSV ledgers
    with open(out / "timings.txt", "a", encoding="utf-8") as fh:
        for idx, hexs, wall in timings:
            fh.write(f"eval {idx} {hexs} {wall:.3f}s\n")

    assert best.fitness is not None
    best_hp = apply_mask(ga.decode(best.chromosome), config.effective_mask())
    best_outcome = cache.get(best.chromosome)
    _write_best_json(out / "best.json", best.chromosome, best_hp,
                     best.fitness, best_outcome.epochs)
    return CampaignResult(best_chromosome=best.chromosome, best_hp=best_hp,
                          best_fitness=best.fitness, log=run_log, out_dir=out)


def _write_best_json(path: Path, chromosome: str, hp: Hyperparameters,
                     fitness: float, epochs: int) -> None:
    import json

    payload = {
        "chromosome_hex": ga.chromosome_hex(chromosome),
        "hyperparameters": hp.as_dict(),
        "fitness": fitness,
        "epochs": epochs,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- baseline-vs-tuned comparison --------------------------------------------


@dataclass
class ConfigResult:
    name: str
    hp: Hyperparameters
    traces: list[TrainingTrace]
    epochs: list[int]      # epochs to success, capped at max_epochs when missed
    episodes: list[int]
    steps: list[int]
    wall_s: list[float]

    def aggregates(self) -> dict[str, float]:
        return {
            "mean_epochs": float(np.mean(self.epochs)),
            "median_epochs": float(np.median(self.epochs)),
            "mean_episodes": float(np.mean(self.episodes)),
            "median_episodes": float(np.median(self.episodes)),
            "mean_steps": float(np.mean(self.steps)),
            "median_steps": float(np.median(self.steps)),
            "mean_wall_s": float(np.mean(self.wall_s)),
            "median_wall_s": float(np.median(self.wall_s)),
        }

    @property
    def reached_runs(self) -> int:
        return sum(1 for t in self.traces if t.outcome == "reached")


@dataclass
class ComparisonReport:
    env: str
    seeds: list[int]
    results: list[ConfigResult]


def run_comparison(
    configs: list[tuple[str, Hyperparameters]],
    env: str,
    schedule: TrainSchedule,
    seeds: list[int],
) -> ComparisonReport:
    """Train every named configuration on every seed and aggregate
    epochs/episodes/steps/time to success (capped runs count the cap)."""
    if not seeds:
        raise ValueError("need at least one seed")
    results = []
    for name, hp in configs:
        traces, epochs, episodes, steps, walls = [], [], [], [], []
        for seed in seeds:
            t0 = time.perf_counter()
            trace = train_until(env, hp, schedule, seed)
            wall = time.perf_counter() - t0
            traces.append(trace)
            epochs.append(trace.epochs_to_success if trace.outcome == "reached"
                          else schedule.max_epochs)
            last = trace.records[-1] if trace.records else None
            episodes.append(last.episodes_cum if last else 0)
            steps.append(last.steps_cum if last else 0)
            walls.append(wall)
        results.append(ConfigResult(name=name, hp=hp, traces=traces, epochs=epochs,
                                    episodes=episodes, steps=steps, wall_s=walls))
    return ComparisonReport(env=env, seeds=list(seeds), results=results)


def mean_success_curves(report: ComparisonReport) -> tuple[list[int], dict[str, list[float]]]:
    """Per-epoch mean success rate per config; runs that stopped early hold
    their final observed rate so all seeds contribute to every epoch."""
    length = max((len(t.records) for r in report.results for t in r.traces), default=0)
    epochs = list(range(1, length + 1))
    curves: dict[str, list[float]] = {}
    for r in report.results:
        means = []
        for i in range(length):
            vals = []
            for t in r.traces:
                if not t.records:
                    vals.append(0.0)
                elif i < len(t.records):
                    vals.append(t.records[i].success_rate)
                else:
                    vals.append(t.records[-1].success_rate)
            means.append(float(np.mean(vals)))
        curves[r.name] = means
    return epochs, curves


def write_comparison_csv(report: ComparisonReport, path) -> None:
    """Aggregate table, one row per configuration. Wall-second aggregates are
    persisted as 0.0 (measured values are printed by the CLI instead)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_HEADER)
        for r in report.results:
            agg = r.aggregates()
            hp = r.hp
            w.writerow([
                r.name, repr(hp.gamma), repr(hp.tau), repr(hp.alpha_critic),
                repr(hp.alpha_actor), repr(hp.epsilon), repr(hp.eta),
                len(r.traces), r.reached_runs,
                repr(agg["mean_epochs"]), repr(agg["median_epochs"]),
                repr(agg["mean_episodes"]), repr(agg["median_episodes"]),
                repr(agg["mean_steps"]), repr(agg["median_steps"]),
                repr(0.0), repr(0.0),
            ])


def write_curves_csv(report: ComparisonReport, path) -> None:
    epochs, curves = mean_success_curves(report)
    names = [r.name for r in report.results]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch"] + names)
        for i, epoch in enumerate(epochs):
            w.writerow([epoch] + [repr(curves[n][i]) for n in names])


# -- flat key=value campaign config files -------------------------------------


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat key=value lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_SCHEDULE_KEYS = {
    "max_epochs": "max_epochs",
    "cycles": "cycles_per_epoch",
    "episodes": "episodes_per_cycle",
    "opt_steps": "opt_steps_per_cycle",
    "batch": "batch_size",
    "her_k": "her_k",
    "threshold": "success_threshold",
    "success_rule": "success_rule",
}

_GA_KEYS = {
    "pop": "population_size",
    "gens": "generations",
    "mutation_rate": "mutation_rate",
    "pressure": "selection_pressure",
    "elitism": "elitism_count",
    "seed": "seed",
    "mutation_mode": "mutation_mode",
}


def build_campaign_config(values: dict[str, str]) -> CampaignConfig:
    """Build a CampaignConfig from flat string key=value pairs (config file
    contents merged with CLI overrides)."""
    values = dict(values)
    env = values.pop("env", None)
    if not env:
        raise ValueError("campaign config requires an env name")
    workers = int(values.pop("workers", "1"))
    out_dir = values.pop("out_dir", "runs/tune")
    mask: dict[str, float] = {}
    for key in list(values):
        if key.startswith("mask."):
            mask[key[len("mask."):]] = float(values.pop(key))
    ga_kwargs: dict = {}
    for key, attr in _GA_KEYS.items():
        if key in values:
            raw = values.pop(key)
            ga_kwargs[attr] = raw if attr == "mutation_mode" else _number(raw)
    sched_kwargs: dict = {}
    for key, attr in _SCHEDULE_KEYS.items():
        if key in values:
            raw = values.pop(key)
            sched_kwargs[attr] = raw if attr == "success_rule" else _number(raw)
    if values:
        raise ValueError(f"unknown campaign config keys: {sorted(values)}")
    return CampaignConfig(env=env, ga=ga.GaConfig(**ga_kwargs),
                          schedule=TrainSchedule(**sched_kwargs),
                          workers=workers, out_dir=out_dir, gene_mask=mask)


def _number(raw: str) -> int | float:
    try:
        return int(raw)
    except ValueError:
        return float(raw)
