"""Command-line entry point: tuning campaigns, single training runs,
baseline-vs-tuned comparisons, and verification utilities (gradient checks
and a synthetic GA sanity campaign).

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import ga, numkit, tuner
from .agent import (CONSECUTIVE_PERFECT, FIRST_REACH, Batch, TrainSchedule,
                    actor_loss_grads, critic_loss_grads, critic_target,
                    init_agent_nets, train_until, write_trace_csv)
from .envs import make_env
from .hyperparams import GENE_ORDER, PRESETS, Hyperparameters

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

GRADCHECK_TOLERANCE = 1e-4
FD_STEP = 1e-5
OPTIMUM_TOLERANCE = 0.01
SANITY_FULL_GENERATIONS = 30


class UsageError(Exception):
    """Bad flags, presets, or config contents."""


def out_root() -> Path:
    return Path(os.environ.get("EVOTUNE_OUT", "runs"))


# -- flag plumbing ------------------------------------------------------------

_TUNE_FLAG_TO_KEY = {
    "env": "env", "pop": "pop", "gens": "gens", "mutation_rate": "mutation_rate",
    "pressure": "pressure", "elitism": "elitism", "max_epochs": "max_epochs",
    "cycles": "cycles", "episodes": "episodes", "opt_steps": "opt_steps",
    "batch": "batch", "her_k": "her_k", "threshold": "threshold",
    "success_rule": "success_rule", "workers": "workers", "seed": "seed",
    "out": "out_dir",
}

_SCHEDULE_FLAGS = ("max_epochs", "cycles", "episodes", "opt_steps", "batch",
                   "her_k", "threshold", "success_rule")


def _add_schedule_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--cycles", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--opt-steps", type=int, dest="opt_steps")
    p.add_argument("--batch", type=int)
    p.add_argument("--her-k", type=int, dest="her_k")
    p.add_argument("--threshold", type=float)
    p.add_argument("--success-rule", dest="success_rule",
                   choices=[FIRST_REACH, CONSECUTIVE_PERFECT])


def _add_ga_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pop", type=int)
    p.add_argument("--gens", type=int)
    p.add_argument("--mutation-rate", type=float, dest="mutation_rate")
    p.add_argument("--pressure", type=float)
    p.add_argument("--elitism", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evotune",
        description="GA hyperparameter tuning for a DDPG+HER goal-reaching stack")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tune", help="run a GA tuning campaign")
    p.add_argument("--config", help="flat key=value campaign config file")
    p.add_argument("--env")
    _add_ga_flags(p)
    _add_schedule_flags(p)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("train", help="one training run with a preset or explicit values")
    p.add_argument("--env")
    p.add_argument("--preset", help="preset name or six comma-separated values "
                                    "(gamma,tau,alpha_critic,alpha_actor,epsilon,eta)")
    _add_schedule_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="train presets over seeds and aggregate")
    p.add_argument("--env")
    p.add_argument("--preset", default="baseline,ga-all-envs",
                   help="comma-separated preset names")
    p.add_argument("--seeds", default="0..9", help="e.g. 0..9 or 0,2,5")
    _add_schedule_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ga-sanity", help="synthetic-fitness GA campaign (no RL)")
    _add_ga_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ga_sanity)

    p = sub.add_parser("presets", help="list the shipped hyperparameter presets")
    p.set_defaults(func=cmd_presets)

    return parser


def _require_env(args: argparse.Namespace) -> str:
    if not args.env:
        raise UsageError("--env is required")
    return args.env


def _schedule_from_args(args: argparse.Namespace) -> TrainSchedule:
    mapping = {
        "max_epochs": "max_epochs", "cycles": "cycles_per_epoch",
        "episodes": "episodes_per_cycle", "opt_steps": "opt_steps_per_cycle",
        "batch": "batch_size", "her_k": "her_k", "threshold": "success_threshold",
        "success_rule": "success_rule",
    }
    kwargs = {attr: getattr(args, flag) for flag, attr in mapping.items()
              if getattr(args, flag, None) is not None}
    return TrainSchedule(**kwargs)


def resolve_hyperparameters(spec: str) -> tuple[str, Hyperparameters]:
    """A preset name, or six comma-separated values in the order
    gamma,tau,alpha_critic,alpha_actor,epsilon,eta."""
    if spec in PRESETS:
        return spec, PRESETS[spec]
    if "," in spec:
        parts = spec.split(",")
        if len(parts) != 6:
            raise UsageError(f"expected 6 comma-separated values, got {len(parts)}")
        try:
            vals = [float(v) for v in parts]
            return "custom", Hyperparameters(*vals)
        except ValueError as e:
            raise UsageError(f"bad hyperparameter values: {e}") from e
    raise UsageError(f"unknown preset {spec!r}; available: {', '.join(PRESETS)}")


def _safe(name: str) -> str:
    return name.replace(":", "-").replace(",", "_")


# -- subcommands ---------------------------------------------------------------


def cmd_tune(args: argparse.Namespace) -> int:
    values: dict[str, str] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        values.update(tuner.parse_config_text(path.read_text(encoding="utf-8")))
    for flag, key in _TUNE_FLAG_TO_KEY.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = str(v)
    values.setdefault("out_dir", str(out_root() / "tune"))
    config = tuner.build_campaign_config(values)
    make_env(config.env)  # fail fast on a bad env name
    print(f"campaign: env={config.env} pop={config.ga.population_size} "
          f"gens={config.ga.generations} workers={config.workers} seed={config.ga.seed} "
          f"out={config.out_dir}")
    t0 = time.perf_counter()
    result = tuner.run_campaign(config)
    wall = time.perf_counter() - t0
    hp = result.best_hp
    print(f"best chromosome: {ga.chromosome_hex(result.best_chromosome)}")
    print("best hyperparameters: " +
          " ".join(f"{name}={getattr(hp, name)}" for name in
                   ("gamma", "tau", "alpha_critic", "alpha_actor", "epsilon", "eta")))
    print(f"best fitness: {result.best_fitness} ({len(result.log)} new evaluations, "
          f"{wall:.1f}s)")
    print(f"artifacts: {result.out_dir}/ga_log.csv, best.json, traces/")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    env_name = _require_env(args)
    make_env(env_name)
    if not args.preset:
        raise UsageError("--preset is required (a name or six comma values)")
    name, hp = resolve_hyperparameters(args.preset)
    schedule = _schedule_from_args(args)
    out = Path(args.out) if args.out else out_root() / "train"
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    trace = train_until(env_name, hp, schedule, args.seed)
    wall = time.perf_counter() - t0
    trace_path = out / f"trace_{_safe(env_name)}_{_safe(name)}_seed{args.seed}.csv"
    write_trace_csv(trace.records, trace_path)
    last = trace.records[-1] if trace.records else None
    epochs = trace.epochs_to_success if trace.outcome == "reached" else len(trace.records)
    print(f"outcome={trace.outcome} epochs={epochs} "
          f"episodes={last.episodes_cum if last else 0} "
          f"steps={last.steps_cum if last else 0} wall_s={wall:.3f}"
          + (" (numeric failure)" if trace.failed else ""))
    print(f"trace: {trace_path}")
    return EXIT_OK


def _parse_seeds(text: str) -> list[int]:
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v != ""]


def cmd_compare(args: argparse.Namespace) -> int:
    env_name = _require_env(args)
    make_env(env_name)
    names = [n.strip() for n in args.preset.split(",") if n.strip()]
    if not names:
        raise UsageError("--preset must name at least one preset")
    configs = []
    for n in names:
        resolved, hp = resolve_hyperparameters(n)
        configs.append((n if resolved != "custom" else "custom", hp))
    seeds = _parse_seeds(args.seeds)
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    schedule = _schedule_from_args(args)
    out = Path(args.out) if args.out else out_root() / "compare"
    (out / "traces").mkdir(parents=True, exist_ok=True)
    report = tuner.run_comparison(configs, env_name, schedule, seeds)
    tuner.write_comparison_csv(report, out / "comparison.csv")
    tuner.write_curves_csv(report, out / "curves.csv")
    for result in report.results:
        for seed, trace in zip(seeds, result.traces):
            write_trace_csv(trace.records,
                            out / "traces" / f"{_safe(result.name)}_seed{seed}.csv")
    with open(out / "timings.txt", "w", encoding="utf-8") as fh:
        for result in report.results:
            for seed, wall in zip(seeds, result.wall_s):
                fh.write(f"{result.name} seed {seed} {wall:.3f}s\n")
    print(f"env={env_name} seeds={args.seeds}")
    for result in report.results:
        agg = result.aggregates()
        print(f"{result.name}: reached {result.reached_runs}/{len(result.traces)} "
              f"mean_epochs={agg['mean_epochs']:.2f} "
              f"mean_episodes={agg['mean_episodes']:.0f} "
              f"mean_steps={agg['mean_steps']:.0f} "
              f"mean_wall_s={agg['mean_wall_s']:.2f}")
    print(f"artifacts: {out}/comparison.csv, curves.csv, traces/ "
          f"(wall_s columns persisted as 0.0; measured timing in timings.txt)")
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------------

KINK_MARGIN = 5e-3  # finite differences need relu kinks away from the batch


def _enforce_kink_margin(params: numkit.MlpParams, x: np.ndarray,
                         margin: float = KINK_MARGIN) -> numkit.MlpParams:
    """Shift hidden biases so no relu pre-activation sits within ``margin`` of
    zero for this batch; FD perturbations then cannot cross a kink."""
    for _ in range(20):
        _, cache = numkit.mlp_forward(params, x)
        layers = list(params.layers)
        moved = False
        for k in range(len(layers) - 1):
            z = cache.pre_activations[k]
            w, b = layers[k]
            b = b.copy()
            for j in range(b.shape[0]):
                if np.any(np.abs(z[:, j]) < margin):
                    b[j] += 2.0 * margin
                    moved = True
            layers[k] = (w, b)
        params = numkit.MlpParams(layers, params.hidden_activation, params.output_activation)
        if not moved:
            break
    return params


def _random_net(rng: np.random.Generator) -> numkit.MlpParams:
    depth = int(rng.integers(1, 4))
    sizes = [int(rng.integers(2, 9)) for _ in range(depth + 1)]
    output = "tanh" if rng.random() < 0.5 else "identity"
    return numkit.init_mlp(rng, sizes, output_activation=output)


def _random_batch(rng: np.random.Generator, n: int, obs_goal_dim: int,
                  action_dim: int) -> Batch:
    return Batch(
        obs_goal=rng.uniform(-1, 1, size=(n, obs_goal_dim)),
        actions=rng.uniform(-1, 1, size=(n, action_dim)),
        rewards=-(rng.random(n) < 0.8).astype(float),
        next_obs_goal=rng.uniform(-1, 1, size=(n, obs_goal_dim)),
        achieved_next=rng.uniform(-1, 1, size=(n, action_dim)),
    )


def run_gradcheck(seed: int = 0, rounds: int = 20, inject_bug: bool = False,
                  quiet: bool = False) -> int:
    """Finite-difference verification of backprop and of the critic/actor loss
    gradients, over ``rounds`` random nets and batches."""
    from dataclasses import replace as _replace

    rng = np.random.default_rng(seed)
    worst = {"backprop": 0.0, "critic_mse": 0.0, "actor_loss": 0.0}
    for round_idx in range(rounds):
        # plain backprop on sum(G * forward(x))
        net = _random_net(rng)
        x = rng.uniform(-1, 1, size=(int(rng.integers(1, 6)), net.in_dim))
        g = rng.uniform(-1, 1, size=(x.shape[0], net.out_dim))
        net = _enforce_kink_margin(net, x)
        out, cache = numkit.mlp_forward(net, x)
        analytic, _ = numkit.mlp_backward(net, cache, g)
        f0 = float(np.sum(g * out))
        fd = numkit.finite_diff_grad(
            lambda p: float(np.sum(g * numkit.mlp_forward(p, x)[0])), net, FD_STEP)
        worst["backprop"] = max(worst["backprop"], numkit.max_rel_diff(
            analytic, fd, abs_floor=numkit.fd_noise_floor(f0, FD_STEP)))

        # critic MSE and actor loss through the training code path
        obs_goal_dim = int(rng.integers(3, 7))
        action_dim = int(rng.integers(1, 4))
        nets = init_agent_nets(rng, obs_goal_dim, action_dim, hidden=(8, 8),
                               actor_final_scale=1.0)
        batch = _random_batch(rng, int(rng.integers(2, 7)), obs_goal_dim, action_dim)
        actor = _enforce_kink_margin(nets.actor, batch.obs_goal)
        nets = _replace(nets, actor=actor)
        mu, _ = numkit.mlp_forward(nets.actor, batch.obs_goal)
        critic_in = np.hstack([batch.obs_goal, nets.max_action * mu])
        critic = _enforce_kink_margin(nets.critic,
                                      np.vstack([np.hstack([batch.obs_goal, batch.actions]),
                                                 critic_in]))
        nets = _replace(nets, critic=critic)
        y = critic_target(nets, batch, gamma=0.98)

        critic_loss, critic_grads = critic_loss_grads(nets, batch, y)
        if inject_bug and round_idx == 0:
            w0, b0 = critic_grads[0]
            critic_grads[0] = (w0 * 1.001, b0)

        def critic_f(p: numkit.MlpParams) -> float:
            loss, _ = critic_loss_grads(_replace(nets, critic=p), batch, y)
            return loss

        fd = numkit.finite_diff_grad(critic_f, nets.critic, FD_STEP)
        worst["critic_mse"] = max(worst["critic_mse"], numkit.max_rel_diff(
            critic_grads, fd, abs_floor=numkit.fd_noise_floor(critic_loss, FD_STEP)))

        actor_loss, actor_grads = actor_loss_grads(nets, batch)

        def actor_f(p: numkit.MlpParams) -> float:
            loss, _ = actor_loss_grads(_replace(nets, actor=p), batch)
            return loss

        fd = numkit.finite_diff_grad(actor_f, nets.actor, FD_STEP)
        worst["actor_loss"] = max(worst["actor_loss"], numkit.max_rel_diff(
            actor_grads, fd, abs_floor=numkit.fd_noise_floor(actor_loss, FD_STEP)))

    failed = [k for k, v in worst.items() if v > GRADCHECK_TOLERANCE]
    if not quiet:
        for k, v in worst.items():
            status = "FAIL" if k in failed else "ok"
            print(f"gradcheck {k}: worst relative diff {v:.3e} [{status}]")
        print(f"gradcheck: {'FAIL' if failed else 'PASS'} "
              f"({rounds} nets, tolerance {GRADCHECK_TOLERANCE})")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    return run_gradcheck(seed=args.seed)


# -- ga-sanity -------------------------------------------------------------------


def run_ga_sanity(config: ga.GaConfig, out_dir: Path, quiet: bool = False) -> int:
    """Run the synthetic-fitness campaign, write the best-per-generation CSV,
    and check monotonicity (elitism on) plus closeness to the known optimum
    (full-length campaigns only)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    per_generation: list[tuple[int, ga.Individual]] = []
    best, _ = ga.evolve(lambda bits: ga.sanity_fitness(ga.decode(bits)), config,
                        on_generation=lambda g, ind: per_generation.append((g, ind)))
    path = out_dir / "ga_sanity.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generation", "best_fitness", "chromosome_hex"] + list(GENE_ORDER))
        for g, ind in per_generation:
            hp = ga.decode(ind.chromosome)
            w.writerow([g, repr(ind.fitness), ga.chromosome_hex(ind.chromosome)]
                       + [repr(getattr(hp, name)) for name in GENE_ORDER])

    ok = True
    series = [ind.fitness for _, ind in per_generation]
    if config.elitism_count > 0:
        monotone = all(a <= b for a, b in zip(series, series[1:]))
        ok &= monotone
        if not quiet:
            print(f"ga-sanity monotonicity: {'ok' if monotone else 'FAIL'} "
                  f"(best-of-generation nondecreasing over {len(series)} generations)")
    elif not quiet:
        print("ga-sanity monotonicity: skipped (elitism disabled)")

    hp = ga.decode(best.chromosome)
    devs = {name: abs(getattr(hp, name) - 0.5) for name in GENE_ORDER}
    worst = max(devs.values())
    if config.generations >= SANITY_FULL_GENERATIONS:
        hit = worst <= OPTIMUM_TOLERANCE
        ok &= hit
        if not quiet:
            print(f"ga-sanity optimum: {'ok' if hit else 'FAIL'} "
                  f"(worst gene deviation {worst:.3f}, tolerance {OPTIMUM_TOLERANCE})")
    elif not quiet:
        print(f"ga-sanity optimum: skipped (short run, {config.generations} generations); "
              f"worst gene deviation {worst:.3f}")
    if not quiet:
        print(f"ga-sanity best fitness {best.fitness} genes " +
              " ".join(f"{n}={getattr(hp, n)}" for n in GENE_ORDER))
        print(f"artifact: {path}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_ga_sanity(args: argparse.Namespace) -> int:
    kwargs = {attr: getattr(args, flag) for flag, attr in
              (("pop", "population_size"), ("gens", "generations"),
               ("mutation_rate", "mutation_rate"), ("pressure", "selection_pressure"),
               ("elitism", "elitism_count"), ("seed", "seed"))
              if getattr(args, flag, None) is not None}
    config = ga.GaConfig(**kwargs)
    out = Path(args.out) if args.out else out_root() / "ga-sanity"
    return run_ga_sanity(config, out)


def cmd_presets(args: argparse.Namespace) -> int:
    for name, hp in PRESETS.items():
        print(f"{name}: " + " ".join(
            f"{field}={getattr(hp, field)}" for field in
            ("gamma", "tau", "alpha_critic", "alpha_actor", "epsilon", "eta")))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # campaign abort, I/O failure
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
