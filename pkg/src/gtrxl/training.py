"""Supervised copy-task training and n-step advantage actor-critic on Numpad."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as tc
from .attention import MemoryState
from .envs import CopySample, NumpadEnv, copy_batch
from .models import ActorCritic, CopyModel
from .optim import AdamState, adam_step, grad_norm
from .tensor import ContractError

RETURN_WINDOW = 200


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    unroll: int = 20
    gamma: float = 0.99
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    total_steps: int = 100_000
    seed: int = 0
    divergence_threshold: float = 1e4
    max_grad_norm: float | None = None
    log_every: int = 10

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"discount must lie in (0, 1], got {self.gamma}")
        for name in ("batch_size", "unroll", "total_steps", "log_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.divergence_threshold <= 0:
            raise ValueError("lr and divergence_threshold must be positive")


# ---------------------------------------------------------------------------
# divergence accounting


def divergence_monitor(loss_history: Sequence[float], threshold: float) -> str:
    """``"diverged"`` iff any loss is non-finite or exceeds ``threshold`` in magnitude."""
    for loss in loss_history:
        if not math.isfinite(loss) or abs(loss) > threshold:
            return "diverged"
    return "healthy"


class DivergenceMonitor:
    """Streaming, latching form of :func:`divergence_monitor`."""

    def __init__(self, threshold: float = 1e4):
        self.threshold = threshold
        self.diverged = False
        self.diverged_at: int | None = None

    def update(self, loss: float, step: int | None = None) -> bool:
        if not self.diverged and divergence_monitor([loss], self.threshold) == "diverged":
            self.diverged = True
            self.diverged_at = step
        return self.diverged


def _apply_update(params, opt: AdamState, max_norm: float | None) -> tuple[float, bool]:
    grads = [p.grad for p in params]
    norm = grad_norm(grads)
    if max_norm is not None and math.isfinite(norm) and norm > max_norm:
        grads = [None if g is None else g * (max_norm / norm) for g in grads]
    applied = adam_step(params, grads, opt)
    for p in params:
        p.grad = None
    return norm, applied


# ---------------------------------------------------------------------------
# supervised copy task


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    applied: bool
    accuracy: float = float("nan")


def _copy_arrays(samples: Sequence[CopySample]):
    tokens = np.stack([s.inputs for s in samples])
    targets = np.stack([s.targets for s in samples])
    return tokens, targets, samples[0].payload_slice


def copy_forward(model: CopyModel, samples: Sequence[CopySample], unroll: int | None = None,
                 carry_memory: bool = True, train: bool = False):
    """Run a batch through the model segment by segment.

    Returns ``(loss_value, accuracy)``.  With ``train=True`` gradients of the
    mean payload cross-entropy are accumulated into the parameters.
    """
    tokens, targets, payload = _copy_arrays(samples)
    batch, length = tokens.shape
    seg = length if unroll is None else unroll
    is_payload = np.zeros(length, dtype=bool)
    is_payload[payload] = True
    n_terms = batch * is_payload.sum()
    memory = None
    total, correct = 0.0, 0
    for start in range(0, length, seg):
        stop = min(start + seg, length)
        if not carry_memory:
            memory = None
        logits, memory = model(tokens[:, start:stop], memory)
        local = np.flatnonzero(is_payload[start:stop])
        if local.size == 0:
            continue
        picked = tc.index(logits, (slice(None), local))
        tgt = targets[:, start:stop][:, local]
        nll = -tc.take_last(tc.log_softmax(picked), tgt)
        chunk_loss = tc.mul(tc.sum(nll), 1.0 / n_terms)
        total += float(chunk_loss.data)
        correct += int((picked.data.argmax(axis=-1) == tgt).sum())
        if train:
            tc.backward(chunk_loss)
    return total, correct / n_terms


def supervised_step(model: CopyModel, samples: Sequence[CopySample], opt: AdamState,
                    unroll: int | None = None, carry_memory: bool = True,
                    max_grad_norm: float | None = None) -> StepResult:
    """One Adam update on the mean payload cross-entropy; returns pre-update statistics.

    A non-finite loss skips the update (``applied=False``).
    """
    params = model.parameters()
    for p in params:
        p.grad = None
    loss, acc = copy_forward(model, samples, unroll, carry_memory, train=True)
    if not math.isfinite(loss):
        for p in params:
            p.grad = None
        return StepResult(loss, float("nan"), False, acc)
    norm, applied = _apply_update(params, opt, max_grad_norm)
    return StepResult(loss, norm, applied, acc)


def copy_accuracy(model: CopyModel, samples: Sequence[CopySample], unroll: int | None = None,
                  carry_memory: bool = True) -> float:
    with tc.no_grad():
        return copy_forward(model, samples, unroll, carry_memory)[1]


# ---------------------------------------------------------------------------
# actor-critic


@dataclass
class RolloutBatch:
    """Time-major trajectories of one unroll for ``N`` environments."""

    observations: np.ndarray  # [U, N, O]
    actions: np.ndarray  # [U, N]
    rewards: np.ndarray  # [U, N]
    dones: np.ndarray  # [U, N]
    values: np.ndarray  # [U, N]
    log_probs: np.ndarray  # [U, N]
    initial_memory: MemoryState  # [N, S, D] per layer, before the first step
    bootstrap: np.ndarray  # [N] value of the state after the last step (0 if done)
    episode_returns: list[float] = field(default_factory=list)

    @property
    def unroll(self) -> int:
        return self.actions.shape[0]


class Rollout:
    """Live collection state: environments, their current observations and memory."""

    def __init__(self, model: ActorCritic, envs: Sequence[NumpadEnv], seed: int = 0):
        self.envs = list(envs)
        self.obs = np.stack([env.reset() for env in self.envs])
        self.memory = model.initial_memory(len(self.envs))
        self.rng = np.random.default_rng(seed)
        self.env_steps = 0


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def collect_rollout(model: ActorCritic, rollout: Rollout, unroll: int) -> RolloutBatch:
    """Step every environment ``unroll`` times under the current policy.

    Within an unroll each step attends to the unroll's initial memory plus the
    unroll so far, exactly as the learner's single-segment forward will.
    Memory is carried across unrolls and zeroed at episode boundaries, which
    must coincide with unroll boundaries.
    """
    envs = rollout.envs
    limit = envs[0].episode_limit
    if limit % unroll:
        raise ContractError(f"unroll {unroll} must divide the episode length {limit}")
    n = len(envs)
    init_mem = rollout.memory.copy()
    obs_seq = np.zeros((n, unroll, rollout.obs.shape[-1]))
    actions = np.zeros((unroll, n), dtype=np.int64)
    rewards = np.zeros((unroll, n))
    dones = np.zeros((unroll, n), dtype=bool)
    values = np.zeros((unroll, n))
    log_probs = np.zeros((unroll, n))
    finished: list[float] = []

    for t in range(unroll):
        obs_seq[:, t] = rollout.obs
        with tc.no_grad():
            lg, vals, memory = model(obs_seq[:, : t + 1], init_mem)
        logits, value = lg.data[:, -1], vals.data[:, -1]
        probs = _softmax(logits)
        u = rollout.rng.random(n)
        act = np.minimum((probs.cumsum(axis=-1) < u[:, None]).sum(axis=-1), probs.shape[-1] - 1)
        actions[t], values[t] = act, value
        log_probs[t] = np.log(probs[np.arange(n), act])
        for i, env in enumerate(envs):
            obs, r, done = env.step(int(act[i]))
            rewards[t, i], dones[t, i] = r, done
            if done:
                finished.append(env.state.total_reward)
                obs = env.reset()
            rollout.obs[i] = obs
    rollout.env_steps += unroll * n

    ended = dones[-1]
    memory.reset(np.flatnonzero(ended))
    rollout.memory = memory
    with tc.no_grad():
        lg, vals, _ = model(rollout.obs[:, None, :], memory)
    bootstrap = np.where(ended, 0.0, vals.data[:, -1])
    return RolloutBatch(obs_seq.transpose(1, 0, 2), actions, rewards, dones, values, log_probs,
                        init_mem, bootstrap, finished)


def discounted_returns(rewards: np.ndarray, dones: np.ndarray, bootstrap: np.ndarray, gamma: float) -> np.ndarray:
    """n-step returns ``R_t = r_t + gamma * (1 - done_t) * R_{t+1}`` with ``R_U = bootstrap``."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    running = np.asarray(bootstrap, dtype=np.float64)
    for t in range(rewards.shape[0] - 1, -1, -1):
        running = rewards[t] + gamma * (1.0 - np.asarray(dones[t], dtype=np.float64)) * running
        out[t] = running
    return out


@dataclass
class ACStats:
    policy_loss: float
    value_loss: float
    entropy: float
    loss: float
    grad_norm: float = float("nan")
    applied: bool = False


def actor_critic_loss(model: ActorCritic, batch: RolloutBatch, config: TrainConfig,
                      advantages: np.ndarray | None = None):
    """Build the scalar loss graph; returns ``(loss_tensor, ACStats)``.

    Advantages are constants of the graph.  Passing them explicitly (``[N, U]``)
    freezes them, which finite-difference checks of this loss need.
    """
    obs = batch.observations.transpose(1, 0, 2)
    logits, values, _ = model(obs, batch.initial_memory)
    returns = discounted_returns(batch.rewards, batch.dones, batch.bootstrap, config.gamma).T
    if advantages is None:
        advantages = returns - values.data
    logp = tc.log_softmax(logits)
    chosen = tc.take_last(logp, batch.actions.T)
    policy_loss = -tc.mean(tc.mul(chosen, advantages))
    err = tc.sub(returns, values)
    value_loss = tc.mean(err * err)
    entropy = -tc.mean(tc.sum(tc.exp(logp) * logp, axis=-1))
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    stats = ACStats(float(policy_loss.data), float(value_loss.data), float(entropy.data), float(loss.data))
    return loss, stats


def actor_critic_step(model: ActorCritic, batch: RolloutBatch, config: TrainConfig, opt: AdamState) -> ACStats:
    """One Adam update on ``-A log pi + c_v (R - V)^2 - c_e H``; a non-finite loss skips it."""
    params = model.parameters()
    for p in params:
        p.grad = None
    loss, stats = actor_critic_loss(model, batch, config)
    if not math.isfinite(stats.loss):
        return stats
    tc.backward(loss)
    stats.grad_norm, stats.applied = _apply_update(params, opt, config.max_grad_norm)
    return stats


# ---------------------------------------------------------------------------
# training loops yielding metrics records


def train_copy(model: CopyModel, config: TrainConfig, payload_len: int, vocab: int,
               unroll: int | None = None, carry_memory: bool = True) -> Iterator[dict]:
    """Supervised training; ``step`` counts updates, ``mean_return`` is windowed payload accuracy."""
    rng = np.random.default_rng([config.seed, 1])
    opt = AdamState.for_params(model.parameters(), lr=config.lr)
    monitor = DivergenceMonitor(config.divergence_threshold)
    window: deque[float] = deque(maxlen=RETURN_WINDOW)
    for step in range(1, config.total_steps + 1):
        samples = copy_batch(config.batch_size, payload_len, vocab, rng)
        res = supervised_step(model, samples, opt, unroll, carry_memory, config.max_grad_norm)
        window.extend([res.accuracy] * len(samples))
        monitor.update(res.loss if res.applied else float("nan"), step)
        if monitor.diverged or step % config.log_every == 0 or step == config.total_steps:
            yield {
                "step": step,
                "loss": res.loss,
                "mean_return": float(np.mean(window)),
                "grad_norm": res.grad_norm,
                "diverged": monitor.diverged,
            }
        if monitor.diverged:
            return


def train_numpad(model: ActorCritic, config: TrainConfig, n: int = 2, length: int | None = None,
                 repress_clears: bool = False, reward_once: bool = True) -> Iterator[dict]:
    """Actor-critic training; ``step`` counts environment steps."""
    seeds = np.random.SeedSequence([config.seed, 2]).spawn(config.batch_size + 1)
    envs = [NumpadEnv(n, length, seed=s, repress_clears=repress_clears, reward_once=reward_once)
            for s in seeds[1:]]
    rollout = Rollout(model, envs, seed=seeds[0])
    opt = AdamState.for_params(model.parameters(), lr=config.lr)
    monitor = DivergenceMonitor(config.divergence_threshold)
    window: deque[float] = deque(maxlen=RETURN_WINDOW)
    update = 0
    while rollout.env_steps < config.total_steps:
        batch = collect_rollout(model, rollout, config.unroll)
        window.extend(batch.episode_returns)
        stats = actor_critic_step(model, batch, config, opt)
        update += 1
        monitor.update(stats.loss if stats.applied else float("nan"), rollout.env_steps)
        done = rollout.env_steps >= config.total_steps
        if monitor.diverged or update % config.log_every == 0 or done:
            yield {
                "step": rollout.env_steps,
                "loss": stats.loss,
                "mean_return": float(np.mean(window)) if window else 0.0,
                "grad_norm": stats.grad_norm,
                "diverged": monitor.diverged,
            }
        if monitor.diverged:
            return
