"""DDPG with hindsight experience replay on goal-conditioned environments.

One training run owns its agent state, environment, and RNG stream, so a run
is bit-reproducible from (env name, hyperparameters, schedule, seed).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import numkit
from .envs import GoalEnv, GoalObservation, make_env
from .hyperparams import Hyperparameters

FIRST_REACH = "first_reach"
CONSECUTIVE_PERFECT = "consecutive_perfect"

TRACE_HEADER = ["epoch", "success_rate", "mean_total_reward", "episodes_cum", "steps_cum", "wall_s"]


class NumericError(RuntimeError):
    """Non-finite loss or gradients during training."""


@dataclass(frozen=True)
class TrainSchedule:
    """Epoch structure: cycles of (rollouts + optimization) followed by one
    deterministic-policy evaluation, repeated until the success rule fires."""

    max_epochs: int = 30
    cycles_per_epoch: int = 10
    episodes_per_cycle: int = 10
    episode_length: int | None = None  # None: use the environment default
    opt_steps_per_cycle: int = 40
    batch_size: int = 128
    eval_rollouts: int = 20
    her_k: int = 4
    success_threshold: float = 0.85
    success_rule: str = FIRST_REACH
    consecutive_needed: int = 10
    buffer_capacity: int = 100_000

    def __post_init__(self) -> None:
        for name in ("max_epochs", "cycles_per_epoch", "episodes_per_cycle",
                     "opt_steps_per_cycle", "batch_size", "eval_rollouts",
                     "consecutive_needed", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.her_k < 0:
            raise ValueError("her_k must be >= 0")
        if not 0.0 < self.success_threshold <= 1.0:
            raise ValueError("success_threshold must be in (0, 1]")
        if self.success_rule not in (FIRST_REACH, CONSECUTIVE_PERFECT):
            raise ValueError(f"unknown success rule: {self.success_rule}")
        if self.episode_length is not None and self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")


@dataclass
class Transition:
    """One (state||goal, action, reward, next_state||goal) record; the achieved
    goal after the step is kept so HER can relabel later."""

    obs_goal: np.ndarray
    action: np.ndarray
    reward: float
    next_obs_goal: np.ndarray
    achieved_next: np.ndarray


@dataclass
class Batch:
    obs_goal: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs_goal: np.ndarray
    achieved_next: np.ndarray

    def __len__(self) -> int:
        return self.obs_goal.shape[0]


class ReplayBuffer:
    """FIFO ring of transitions with uniform sampling (with replacement)."""

    def __init__(self, capacity: int, obs_goal_dim: int, action_dim: int, goal_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._obs = np.zeros((capacity, obs_goal_dim))
        self._act = np.zeros((capacity, action_dim))
        self._rew = np.zeros(capacity)
        self._next = np.zeros((capacity, obs_goal_dim))
        self._ach = np.zeros((capacity, goal_dim))
        self._cursor = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, t: Transition) -> None:
        i = self._cursor
        self._obs[i] = t.obs_goal
        self._act[i] = t.action
        self._rew[i] = t.reward
        self._next[i] = t.next_obs_goal
        self._ach[i] = t.achieved_next
        self._cursor = (self._cursor + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def extend(self, transitions: list[Transition]) -> None:
        for t in transitions:
            self.add(t)

    def sample(self, rng: np.random.Generator, n: int) -> Batch:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._size, size=n)
        return Batch(
            obs_goal=self._obs[idx].copy(),
            actions=self._act[idx].copy(),
            rewards=self._rew[idx].copy(),
            next_obs_goal=self._next[idx].copy(),
            achieved_next=self._ach[idx].copy(),
        )

    def rows(self) -> Batch:
        """All stored transitions, oldest slot first (for invariant checks)."""
        return Batch(
            obs_goal=self._obs[: self._size].copy(),
            actions=self._act[: self._size].copy(),
            rewards=self._rew[: self._size].copy(),
            next_obs_goal=self._next[: self._size].copy(),
            achieved_next=self._ach[: self._size].copy(),
        )


class RunningNormalizer:
    """Running mean/std observation normalizer (off by default at desk scale)."""

    def __init__(self, dim: int, clip: float = 5.0, eps: float = 1e-2):
        self.dim = dim
        self.clip = clip
        self.eps = eps
        self._count = 0.0
        self._sum = np.zeros(dim)
        self._sumsq = np.zeros(dim)

    def update(self, rows: np.ndarray) -> None:
        rows = np.atleast_2d(rows)
        self._count += rows.shape[0]
        self._sum += rows.sum(axis=0)
        self._sumsq += (rows ** 2).sum(axis=0)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        if self._count == 0:
            return x
        mean = self._sum / self._count
        var = np.maximum(self._sumsq / self._count - mean ** 2, self.eps ** 2)
        return np.clip((x - mean) / np.sqrt(var), -self.clip, self.clip)


@dataclass
class AgentNets:
    """Actor/critic plus their polyak-averaged target copies and optimizer state."""

    actor: numkit.MlpParams
    critic: numkit.MlpParams
    target_actor: numkit.MlpParams
    target_critic: numkit.MlpParams
    actor_opt: numkit.AdamState
    critic_opt: numkit.AdamState
    max_action: float = 1.0
    optimizer: str = "adam"


def _copy_params(p: numkit.MlpParams) -> numkit.MlpParams:
    return numkit.MlpParams([(w.copy(), b.copy()) for w, b in p.layers],
                            p.hidden_activation, p.output_activation)


def init_agent_nets(
    rng: np.random.Generator,
    obs_goal_dim: int,
    action_dim: int,
    max_action: float = 1.0,
    hidden: tuple[int, ...] = (64, 64),
    actor_final_scale: float = 1e-2,
    optimizer: str = "adam",
) -> AgentNets:
    """Fresh actor/critic with targets initialized as exact copies."""
    if optimizer not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer: {optimizer}")
    actor = numkit.init_mlp(rng, [obs_goal_dim, *hidden, action_dim],
                            output_activation="tanh", final_scale=actor_final_scale)
    critic = numkit.init_mlp(rng, [obs_goal_dim + action_dim, *hidden, 1],
                             output_activation="identity")
    return AgentNets(
        actor=actor,
        critic=critic,
        target_actor=_copy_params(actor),
        target_critic=_copy_params(critic),
        actor_opt=numkit.adam_init(actor),
        critic_opt=numkit.adam_init(critic),
        max_action=max_action,
        optimizer=optimizer,
    )


def _normalized(x: np.ndarray, normalizer: RunningNormalizer | None) -> np.ndarray:
    return normalizer.normalize(x) if normalizer is not None else x


def deterministic_action(
    nets: AgentNets, obs: GoalObservation, normalizer: RunningNormalizer | None = None
) -> np.ndarray:
    x = _normalized(obs.concat(), normalizer)[None, :]
    out, _ = numkit.mlp_forward(nets.actor, x)
    return np.clip(nets.max_action * out[0], -nets.max_action, nets.max_action)


def behavioral_action(
    nets: AgentNets,
    obs: GoalObservation,
    epsilon: float,
    eta: float,
    max_action: float,
    rng: np.random.Generator,
    normalizer: RunningNormalizer | None = None,
) -> np.ndarray:
    """Exploration policy: uniform random with probability epsilon, otherwise the
    actor output plus Gaussian noise of std eta*max_action, clipped afterwards."""
    d = nets.actor.out_dim
    if rng.random() < epsilon:
        return rng.uniform(-max_action, max_action, size=d)
    a = deterministic_action(nets, obs, normalizer)
    a = a + eta * max_action * rng.standard_normal(d)
    return np.clip(a, -max_action, max_action)


def critic_target(
    nets: AgentNets, batch: Batch, gamma: float,
    normalizer: RunningNormalizer | None = None,
) -> np.ndarray:
    """y = r + gamma * Q'(s', mu'(s')), clipped into [-1/(1-gamma+1e-8), 0]."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    x_next = _normalized(batch.next_obs_goal, normalizer)
    mu_next, _ = numkit.mlp_forward(nets.target_actor, x_next)
    a_next = np.clip(nets.max_action * mu_next, -nets.max_action, nets.max_action)
    q_next, _ = numkit.mlp_forward(nets.target_critic, np.hstack([x_next, a_next]))
    y = batch.rewards + gamma * q_next[:, 0]
    return np.clip(y, -1.0 / (1.0 - gamma + 1e-8), 0.0)


def _opt_step(nets: AgentNets, which: str, grads: list[numkit.Layer], lr: float) -> AgentNets:
    params = getattr(nets, which)
    state = getattr(nets, which + "_opt")
    if nets.optimizer == "adam":
        new_params, new_state = numkit.adam_step(params, grads, state, lr)
    else:
        new_params = numkit.sgd_step(params, grads, lr)
        new_state = replace(state, step=state.step + 1)
    return replace(nets, **{which: new_params, which + "_opt": new_state})


def critic_loss_grads(
    nets: AgentNets, batch: Batch, y: np.ndarray,
    normalizer: RunningNormalizer | None = None,
) -> tuple[float, list[numkit.Layer]]:
    """MSE of Q(s||g, a) against fixed targets y, with its exact gradients."""
    x = _normalized(batch.obs_goal, normalizer)
    q, cache = numkit.mlp_forward(nets.critic, np.hstack([x, batch.actions]))
    resid = q[:, 0] - y
    loss = float(np.mean(resid ** 2))
    if not np.isfinite(loss):
        raise NumericError("critic loss is not finite")
    upstream = (2.0 / len(batch)) * resid[:, None]
    grads, _ = numkit.mlp_backward(nets.critic, cache, upstream)
    return loss, grads


def actor_loss_grads(
    nets: AgentNets, batch: Batch,
    normalizer: RunningNormalizer | None = None,
) -> tuple[float, list[numkit.Layer]]:
    """-mean Q(s||g, mu(s||g)) and its gradients w.r.t. actor parameters only;
    the critic serves as a frozen function of the action."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    x = _normalized(batch.obs_goal, normalizer)
    mu, actor_cache = numkit.mlp_forward(nets.actor, x)
    a = nets.max_action * mu
    q, critic_cache = numkit.mlp_forward(nets.critic, np.hstack([x, a]))
    loss = float(-np.mean(q))
    if not np.isfinite(loss):
        raise NumericError("actor loss is not finite")
    upstream_q = np.full((len(batch), 1), -1.0 / len(batch))
    _, input_grad = numkit.mlp_backward(nets.critic, critic_cache, upstream_q)
    d_action = input_grad[:, -nets.actor.out_dim:] * nets.max_action
    grads, _ = numkit.mlp_backward(nets.actor, actor_cache, d_action)
    return loss, grads


def critic_update(
    nets: AgentNets, batch: Batch, gamma: float, alpha_critic: float,
    normalizer: RunningNormalizer | None = None,
) -> tuple[AgentNets, float]:
    """One optimizer step on the mean squared error against the critic target."""
    y = critic_target(nets, batch, gamma, normalizer)
    loss, grads = critic_loss_grads(nets, batch, y, normalizer)
    return _opt_step(nets, "critic", grads, alpha_critic), loss


def actor_update(
    nets: AgentNets, batch: Batch, alpha_actor: float,
    normalizer: RunningNormalizer | None = None,
) -> tuple[AgentNets, float]:
    """One optimizer step on -mean Q(s, mu(s)); the critic stays frozen."""
    loss, grads = actor_loss_grads(nets, batch, normalizer)
    return _opt_step(nets, "actor", grads, alpha_actor), loss


def polyak_update(nets: AgentNets, tau: float) -> AgentNets:
    """theta' <- tau*theta + (1-tau)*theta' for both target nets."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")

    def blend(main: numkit.MlpParams, target: numkit.MlpParams) -> numkit.MlpParams:
        layers = [
            (tau * wm + (1.0 - tau) * wt, tau * bm + (1.0 - tau) * bt)
            for (wm, bm), (wt, bt) in zip(main.layers, target.layers)
        ]
        return numkit.MlpParams(layers, main.hidden_activation, main.output_activation)

    return replace(nets,
                   target_actor=blend(nets.actor, nets.target_actor),
                   target_critic=blend(nets.critic, nets.target_critic))


def her_relabel(
    episode: list[Transition],
    her_k: int,
    rng: np.random.Generator,
    reward_fn: Callable[[np.ndarray, np.ndarray], float],
    goal_dim: int,
) -> list[Transition]:
    """Future-strategy relabeling: for each step t, draw her_k future indices
    u in (t, T] and emit copies with the goal replaced by the achieved goal
    after step u and the reward recomputed for that goal."""
    horizon = len(episode)
    if horizon == 0:
        raise ValueError("her_relabel needs a complete, non-empty episode")
    out: list[Transition] = []
    for t, tr in enumerate(episode):
        for _ in range(her_k):
            u = int(rng.integers(t + 1, horizon + 1))
            new_goal = episode[u - 1].achieved_next
            reward = reward_fn(tr.achieved_next, new_goal)
            out.append(Transition(
                obs_goal=np.concatenate([tr.obs_goal[:-goal_dim], new_goal]),
                action=tr.action.copy(),
                reward=reward,
                next_obs_goal=np.concatenate([tr.next_obs_goal[:-goal_dim], new_goal]),
                achieved_next=tr.achieved_next.copy(),
            ))
    return out


# -- training loop ----------------------------------------------------------


@dataclass
class AgentState:
    nets: AgentNets
    buffer: ReplayBuffer
    normalizer: RunningNormalizer | None = None
    episodes: int = 0
    env_steps: int = 0


def init_agent(
    rng: np.random.Generator,
    env: GoalEnv,
    schedule: TrainSchedule,
    normalize_observations: bool = False,
    hidden: tuple[int, ...] = (64, 64),
    optimizer: str = "adam",
) -> AgentState:
    spec = env.spec
    obs_goal_dim = spec.state_dim + spec.goal_dim
    nets = init_agent_nets(rng, obs_goal_dim, spec.action_dim,
                           max_action=spec.max_action, hidden=hidden, optimizer=optimizer)
    buffer = ReplayBuffer(schedule.buffer_capacity, obs_goal_dim, spec.action_dim, spec.goal_dim)
    normalizer = RunningNormalizer(obs_goal_dim) if normalize_observations else None
    return AgentState(nets=nets, buffer=buffer, normalizer=normalizer)


@dataclass
class EpochRecord:
    epoch: int
    success_rate: float
    mean_total_reward: float
    episodes_cum: int
    steps_cum: int
    wall_s: float


@dataclass
class TrainingTrace:
    records: list[EpochRecord] = field(default_factory=list)
    outcome: str = "exhausted"  # "reached" or "exhausted"
    epochs_to_success: int | None = None
    failed: bool = False

    @property
    def success_rates(self) -> list[float]:
        return [r.success_rate for r in self.records]


def rollout_episode(
    agent: AgentState, env: GoalEnv, hp: Hyperparameters, rng: np.random.Generator
) -> list[Transition]:
    obs = env.reset(rng)
    episode: list[Transition] = []
    done = False
    while not done:
        action = behavioral_action(agent.nets, obs, hp.epsilon, hp.eta,
                                   env.spec.max_action, rng, agent.normalizer)
        result = env.step(action)
        episode.append(Transition(
            obs_goal=obs.concat(),
            action=action.copy(),
            reward=result.reward,
            next_obs_goal=result.observation.concat(),
            achieved_next=result.observation.achieved_goal.copy(),
        ))
        obs = result.observation
        done = result.done
    return episode


def evaluate_policy(
    policy: Callable[[GoalObservation], np.ndarray],
    env: GoalEnv,
    eval_rollouts: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """(success rate, mean total episode reward) over full-horizon rollouts;
    a rollout succeeds if the goal predicate holds at any step."""
    if eval_rollouts < 1:
        raise ValueError("eval_rollouts must be >= 1")
    successes = 0
    total_rewards = []
    for _ in range(eval_rollouts):
        obs = env.reset(rng)
        hit = False
        total = 0.0
        done = False
        while not done:
            result = env.step(policy(obs))
            total += result.reward
            hit = hit or result.is_success
            obs = result.observation
            done = result.done
        successes += int(hit)
        total_rewards.append(total)
    return successes / eval_rollouts, float(np.mean(total_rewards))


def evaluate(
    nets: AgentNets, env: GoalEnv, eval_rollouts: int, rng: np.random.Generator,
    normalizer: RunningNormalizer | None = None,
) -> float:
    """Success rate of the deterministic policy (epsilon=0, eta=0)."""
    rate, _ = evaluate_policy(lambda o: deterministic_action(nets, o, normalizer),
                              env, eval_rollouts, rng)
    return rate


def run_epoch(
    agent: AgentState,
    env: GoalEnv,
    schedule: TrainSchedule,
    hp: Hyperparameters,
    rng: np.random.Generator,
    epoch: int = 1,
    start_time: float | None = None,
) -> tuple[AgentState, EpochRecord]:
    """One epoch: cycles of (rollouts, HER storage, optimization), then one
    deterministic evaluation."""
    if start_time is None:
        start_time = time.perf_counter()
    goal_dim = env.spec.goal_dim
    for _ in range(schedule.cycles_per_epoch):
        for _ in range(schedule.episodes_per_cycle):
            episode = rollout_episode(agent, env, hp, rng)
            if agent.normalizer is not None:
                agent.normalizer.update(np.stack([t.obs_goal for t in episode]))
            agent.buffer.extend(episode)
            agent.buffer.extend(her_relabel(episode, schedule.her_k, rng,
                                            env.compute_reward, goal_dim))
            agent.episodes += 1
            agent.env_steps += len(episode)
        for _ in range(schedule.opt_steps_per_cycle):
            batch = agent.buffer.sample(rng, schedule.batch_size)
            nets, _ = critic_update(agent.nets, batch, hp.gamma, hp.alpha_critic,
                                    agent.normalizer)
            nets, _ = actor_update(nets, batch, hp.alpha_actor, agent.normalizer)
            agent.nets = polyak_update(nets, hp.tau)
    rate, mean_reward = evaluate_policy(
        lambda o: deterministic_action(agent.nets, o, agent.normalizer),
        env, schedule.eval_rollouts, rng)
    record = EpochRecord(
        epoch=epoch,
        success_rate=rate,
        mean_total_reward=mean_reward,
        episodes_cum=agent.episodes,
        steps_cum=agent.env_steps,
        wall_s=time.perf_counter() - start_time,
    )
    return agent, record


def epochs_to_success(
    success_rates: list[float],
    rule: str,
    threshold: float,
    consecutive_needed: int = 10,
) -> int | None:
    """Apply a success rule to an evaluation sequence; 1-based epoch index or None.

    first_reach: first epoch whose rate >= threshold. consecutive_perfect: the
    epoch completing the required run of 1.0 evaluations."""
    if rule == FIRST_REACH:
        for i, r in enumerate(success_rates, start=1):
            if r >= threshold:
                return i
        return None
    if rule == CONSECUTIVE_PERFECT:
        run = 0
        for i, r in enumerate(success_rates, start=1):
            run = run + 1 if r == 1.0 else 0
            if run >= consecutive_needed:
                return i
        return None
    raise ValueError(f"unknown success rule: {rule}")


def train_until(
    env: str | GoalEnv,
    hp: Hyperparameters,
    schedule: TrainSchedule,
    seed: int,
    normalize_observations: bool = False,
    optimizer: str = "adam",
) -> TrainingTrace:
    """Train until the schedule's success rule fires or max_epochs is exhausted."""
    if isinstance(env, str):
        env = make_env(env)
    if schedule.episode_length is not None and schedule.episode_length != env.spec.episode_length:
        env = type(env)(mode=env.spec.mode, episode_length=schedule.episode_length)
    rng = np.random.default_rng(seed)
    agent = init_agent(rng, env, schedule, normalize_observations, optimizer=optimizer)
    trace = TrainingTrace()
    start = time.perf_counter()
    for epoch in range(1, schedule.max_epochs + 1):
        try:
            agent, record = run_epoch(agent, env, schedule, hp, rng, epoch, start)
        except (NumericError, FloatingPointError):
            trace.failed = True
            break
        trace.records.append(record)
        hit = epochs_to_success(trace.success_rates, schedule.success_rule,
                                schedule.success_threshold, schedule.consecutive_needed)
        if hit is not None:
            trace.outcome = "reached"
            trace.epochs_to_success = hit
            break
    return trace


# -- trace CSV --------------------------------------------------------------


def write_trace_csv(records: list[EpochRecord], path) -> None:
    """Persist a trace. The wall_s column is written as 0.0 so that artifacts
    are byte-reproducible; measured timing is reported on stdout instead."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in records:
            w.writerow([r.epoch, repr(r.success_rate), repr(r.mean_total_reward),
                        r.episodes_cum, r.steps_cum, repr(0.0)])


def read_trace_csv(path) -> list[EpochRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [EpochRecord(
            epoch=int(row["epoch"]),
            success_rate=float(row["success_rate"]),
            mean_total_reward=float(row["mean_total_reward"]),
            episodes_cum=int(row["episodes_cum"]),
            steps_cum=int(row["steps_cum"]),
            wall_s=float(row["wall_s"]),
        ) for row in reader]
