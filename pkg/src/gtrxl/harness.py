"""Experiment execution: config parsing, seed x learning-rate sweeps, JSONL
metrics, checkpoints, and after-the-fact run ranking."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .blocks import StackConfig
from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .envs import N_ACTIONS, NumpadEnv, copy_batch, observation_size
from .models import ActorCritic, CopyModel
from .tensor import ContractError
from .training import (
    Rollout,
    TrainConfig,
    collect_rollout,
    copy_accuracy,
    train_copy,
    train_numpad,
)

METRIC_FIELDS = ("run_id", "step", "loss", "mean_return", "grad_norm", "diverged", "wall_clock")


class HarnessError(RuntimeError):
    """Bad experiment configuration or output location."""


@dataclass(frozen=True)
class EnvSpec:
    """``name`` is ``"numpad"`` (uses n, length, repress_clears, reward_once, head_hidden)
    or ``"copy"`` (uses payload_len, vocab, unroll, carry_memory)."""

    name: str = "numpad"
    n: int = 2
    length: int | None = None
    repress_clears: bool = False
    reward_once: bool = True
    head_hidden: int = 256
    payload_len: int = 10
    vocab: int = 8
    unroll: int | None = None
    carry_memory: bool = True

    def __post_init__(self):
        if self.name not in ("numpad", "copy"):
            raise HarnessError(f"unknown environment {self.name!r}; expected 'numpad' or 'copy'")


@dataclass(frozen=True)
class ExperimentConfig:
    stack: StackConfig = field(default_factory=lambda: StackConfig(variant="gtrxl"))
    train: TrainConfig = field(default_factory=TrainConfig)
    env: EnvSpec = field(default_factory=EnvSpec)
    n_seeds: int = 1
    n_samples: int = 1
    lr_range: tuple[float, float] | None = None  # log-uniform sampling bounds
    lr_values: tuple[float, ...] | None = None  # explicit learning rates, override sampling
    out_dir: str = "runs"
    record_wall_clock: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.n_seeds < 1 or self.n_samples < 1:
            raise HarnessError("n_seeds and n_samples must be at least 1")
        if self.lr_range is not None:
            lo, hi = self.lr_range
            if not 0 < lo < hi:
                raise HarnessError(f"lr_range needs 0 < low < high, got {self.lr_range}")
        if self.workers < 1:
            raise HarnessError("workers must be at least 1")

    def learning_rates(self) -> list[float]:
        """One learning rate per hyperparameter sample, shared by every seed."""
        if self.lr_values is not None:
            return [float(v) for v in self.lr_values]
        if self.lr_range is None:
            return [self.train.lr] * self.n_samples
        rng = np.random.default_rng([self.train.seed, 3])
        lo, hi = np.log(self.lr_range[0]), np.log(self.lr_range[1])
        return [float(np.exp(rng.uniform(lo, hi))) for _ in range(self.n_samples)]

    def to_dict(self) -> dict:
        return {
            "stack": self.stack.to_dict(),
            "train": asdict(self.train),
            "env": asdict(self.env),
            "n_seeds": self.n_seeds,
            "n_samples": self.n_samples,
            "lr_range": list(self.lr_range) if self.lr_range else None,
            "lr_values": list(self.lr_values) if self.lr_values else None,
            "out_dir": self.out_dir,
            "record_wall_clock": self.record_wall_clock,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {"stack", "train", "env", "n_seeds", "n_samples", "lr_range", "lr_values",
                 "out_dir", "record_wall_clock", "workers"}
        unknown = set(d) - known
        if unknown:
            raise HarnessError(f"unknown config keys: {sorted(unknown)}")
        try:
            stack = StackConfig.from_dict(d.pop("stack", {"variant": "gtrxl"}))
            train = TrainConfig(**d.pop("train", {}))
            env = EnvSpec(**d.pop("env", {}))
        except (TypeError, ValueError, ContractError) as exc:
            raise HarnessError(f"bad config section: {exc}") from exc
        for key in ("lr_range", "lr_values"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(stack=stack, train=train, env=env, **d)


def parse_json(text: str, source: str = "<config>"):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise HarnessError(f"{source}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise HarnessError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(parse_json(text, str(path)))


# ---------------------------------------------------------------------------
# running


@dataclass(frozen=True)
class RunSpec:
    run_id: str
    seed: int
    lr: float


@dataclass
class RunSummary:
    run_id: str
    metrics_path: Path
    checkpoint: Path
    last_step: int
    mean_return: float
    diverged: bool


def plan_runs(config: ExperimentConfig) -> list[RunSpec]:
    lrs = config.learning_rates()
    return [
        RunSpec(f"seed{config.train.seed + i}-lr{j}", config.train.seed + i, lr)
        for i in range(config.n_seeds)
        for j, lr in enumerate(lrs)
    ]


def build_model(stack: StackConfig, env: EnvSpec, seed: int):
    rng = np.random.default_rng([seed, 0])
    if env.name == "copy":
        return CopyModel.init(stack, env.vocab, rng)
    return ActorCritic.init(stack, observation_size(env.n), N_ACTIONS, rng, head_hidden=env.head_hidden)


def train_records(model, env: EnvSpec, train: TrainConfig) -> Iterator[dict]:
    if env.name == "copy":
        return train_copy(model, train, env.payload_len, env.vocab, env.unroll, env.carry_memory)
    return train_numpad(model, train, env.n, env.length, env.repress_clears, env.reward_once)


def _clean(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    return x if math.isfinite(x) else None  # NaN / inf are not valid JSON


def format_record(run_id: str, rec: dict, wall_clock: float | None) -> str:
    out = {"run_id": run_id}
    for key in METRIC_FIELDS[1:-1]:
        out[key] = _clean(rec[key])
    out["wall_clock"] = wall_clock
    return json.dumps(out, sort_keys=False)


def _prepare_out_dir(out_dir: Path) -> None:
    try:
        (out_dir / "metrics").mkdir(parents=True, exist_ok=True)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        probe = out_dir / "metrics" / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise HarnessError(f"output directory {out_dir} is not writable: {exc}") from exc


def execute_run(config: ExperimentConfig, run: RunSpec) -> RunSummary:
    out_dir = Path(config.out_dir)
    train = TrainConfig(**{**asdict(config.train), "lr": run.lr, "seed": run.seed})
    model = build_model(config.stack, config.env, run.seed)
    metrics_path = out_dir / "metrics" / f"{run.run_id}.jsonl"
    start = time.perf_counter()
    last = {"step": 0, "mean_return": 0.0, "diverged": False}
    with open(metrics_path, "w") as fh:
        for rec in train_records(model, config.env, train):
            clock = round(time.perf_counter() - start, 3) if config.record_wall_clock else None
            fh.write(format_record(run.run_id, rec, clock) + "\n")
            fh.flush()
            last = rec
    meta = {
        "run_id": run.run_id,
        "stack": config.stack.to_dict(),
        "train": asdict(train),
        "env": asdict(config.env),
        "step": int(last["step"]),
        "diverged": bool(last["diverged"]),
    }
    ckpt = save_checkpoint(out_dir / "checkpoints" / run.run_id, model, meta)
    return RunSummary(run.run_id, metrics_path, ckpt, int(last["step"]), float(last["mean_return"]),
                      bool(last["diverged"]))


def _execute(args) -> RunSummary:
    return execute_run(*args)


def run_experiment(config: ExperimentConfig, workers: int | None = None) -> list[RunSummary]:
    """Train every (seed, learning rate) pair; one JSONL file and one checkpoint per run."""
    _prepare_out_dir(Path(config.out_dir))
    runs = plan_runs(config)
    workers = config.workers if workers is None else workers
    if workers == 1:
        return [execute_run(config, run) for run in runs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_execute, [(config, run) for run in runs]))


# ---------------------------------------------------------------------------
# ranking


@dataclass(frozen=True)
class RankRow:
    checkpoint: int
    rank: int
    run_id: str
    score: float


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def score_at(records: Sequence[dict], checkpoint: int) -> float:
    """Windowed mean return of the last record at or before ``checkpoint``; 0 once diverged."""
    score = 0.0
    for rec in records:
        if rec["step"] > checkpoint:
            break
        if rec["diverged"]:
            return 0.0
        score = rec["mean_return"] if rec["mean_return"] is not None else 0.0
    return float(score)


def rank_runs(metrics_dir, checkpoints: Sequence[int]) -> list[RankRow]:
    """Rank runs by score at each checkpoint, best first (ties broken by run id)."""
    files = sorted(Path(metrics_dir).glob("*.jsonl"))
    runs = {}
    for f in files:
        records = read_metrics(f)
        if records:
            runs[records[0]["run_id"]] = records
    rows = []
    for c in checkpoints:
        scored = sorted(((score_at(r, c), run_id) for run_id, r in runs.items()), key=lambda s: (-s[0], s[1]))
        rows.extend(RankRow(int(c), i + 1, run_id, score) for i, (score, run_id) in enumerate(scored))
    return rows


def write_ranking(rows: Sequence[RankRow], path_or_file) -> None:
    own = isinstance(path_or_file, (str, os.PathLike))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["checkpoint", "rank", "run_id", "score"])
        for r in rows:
            writer.writerow([r.checkpoint, r.rank, r.run_id, repr(r.score)])
    finally:
        if own:
            fh.close()


# ---------------------------------------------------------------------------
# evaluation


def load_model(checkpoint_dir):
    arrays, meta = read_checkpoint(checkpoint_dir)
    stack = StackConfig.from_dict(meta["stack"])
    env = EnvSpec(**meta["env"])
    model = build_model(stack, env, 0)
    load_into(model, arrays)
    return model, env, meta


def evaluate_numpad(model: ActorCritic, n: int, length: int | None, episodes: int, seed: int = 0,
                    n_envs: int = 16, unroll: int = 20, repress_clears: bool = False,
                    reward_once: bool = True) -> list[float]:
    """Returns of the first ``episodes`` completed episodes under the sampling policy."""
    seeds = np.random.SeedSequence([seed, 4]).spawn(n_envs + 1)
    envs = [NumpadEnv(n, length, seed=s, repress_clears=repress_clears, reward_once=reward_once)
            for s in seeds[1:]]
    rollout = Rollout(model, envs, seed=seeds[0])
    returns: list[float] = []
    while len(returns) < episodes:
        returns.extend(collect_rollout(model, rollout, unroll).episode_returns)
    return returns[:episodes]


def evaluate_checkpoint(checkpoint_dir, episodes: int = 200, seed: int = 0) -> dict:
    model, env, meta = load_model(checkpoint_dir)
    if env.name == "copy":
        samples = copy_batch(episodes, env.payload_len, env.vocab, np.random.default_rng([seed, 5]))
        acc = copy_accuracy(model, samples, env.unroll, env.carry_memory)
        return {"run_id": meta["run_id"], "task": "copy", "samples": episodes, "accuracy": acc}
    returns = evaluate_numpad(model, env.n, env.length, episodes, seed, repress_clears=env.repress_clears,
                              reward_once=env.reward_once)
    return {"run_id": meta["run_id"], "task": "numpad", "episodes": episodes,
            "mean_return": float(np.mean(returns)), "std_return": float(np.std(returns))}


__all__ = [
    "EnvSpec",
    "ExperimentConfig",
    "HarnessError",
    "RankRow",
    "RunSummary",
    "evaluate_checkpoint",
    "evaluate_numpad",
    "load_config",
    "rank_runs",
    "run_experiment",
    "write_ranking",
]
