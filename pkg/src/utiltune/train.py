"""REINFORCE with single-step episodes over logged triplets.

Loss per batch: ``L = -(1/B) sum_i r_i log pi(a_i | s_i)``; update
``theta <- theta - step_size * grad L``. No importance weights, no baseline.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .core import CHANNELS, ActionGrid, RewardConfig, normalize_array
from .errors import ConfigError, NumericError, SchemaError
from .logfile import LogData, read_log
from .policy import ArchConfig, PolicyInputs, PolicyNet, global_norm, init, log_softmax, save
from .simenv import FeatureSchema


@dataclass(frozen=True)
class TrainConfig:
    step_size: float = 1.0
    batch_size: int = 64
    epochs: int = 5
    seed: int = 0
    reward_config: RewardConfig = field(default_factory=RewardConfig)
    shuffle: bool = True
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if not self.step_size > 0:
            raise ConfigError("step_size must be > 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    @property
    def discount(self) -> float:
        return 0.0


@dataclass(frozen=True)
class StepRecord:
    step: int
    mean_loss: float
    mean_reward: float
    gradient_norm: float
    logged_reward: float = 0.0


@dataclass
class TrainReport:
    steps: list[StepRecord]
    wall_time: float = 0.0
    checkpoint_path: str | None = None

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def mean_reward_window(self, first: bool, frac: float = 0.1) -> float:
        k = max(1, int(round(len(self.steps) * frac)))
        window = self.steps[:k] if first else self.steps[-k:]
        return float(np.mean([s.mean_reward for s in window]))

    def write(self, path) -> None:
        """Per-step metrics as JSON lines; wall time stays out so the file is reproducible."""
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.steps:
                fh.write(json.dumps(s.__dict__, separators=(",", ":")) + "\n")
            fh.write(json.dumps({"final": {"steps": self.n_steps, "checkpoint_path": self.checkpoint_path}},
                                separators=(",", ":")) + "\n")


def batch_rewards(batch: LogData, reward_config: RewardConfig) -> np.ndarray:
    """Rewards recomputed from the logged winner; gated requests get 0.

    With normalization on, each probability channel is min-max scaled over
    the batch's non-gated winners before the user-value sum.
    """
    ok = batch.has_winner
    camp = np.where(ok, batch.campaign, 0)
    coeffs = reward_config.coeff_matrix()[camp]
    est_rev = np.select(
        [camp == 0, camp == 1], [batch.p_click * batch.bid, batch.p_conversion * batch.bid], batch.bid
    )
    revenue = est_rev * reward_config.revenue_scale_vector()[camp]
    uv = np.zeros(len(batch))
    for i, ch in enumerate(CHANNELS):
        p = getattr(batch, ch)
        if reward_config.normalization:
            q = np.zeros(len(batch))
            if ok.any():
                q[ok] = normalize_array(p[ok])
            p = q
        uv = uv + coeffs[:, i] * p
    return np.where(ok, revenue + uv, 0.0)


def policy_value(chosen_log_probs, rewards, behavior_probs) -> float:
    """Self-normalized importance estimate of the current policy's mean reward on a batch."""
    w = np.exp(chosen_log_probs - np.log(behavior_probs))
    total = w.sum()
    return float((w * rewards).sum() / total) if total > 0 else 0.0


def train_step(net: PolicyNet, inputs: PolicyInputs, actions, rewards, step_size: float, step: int = 0,
               behavior_probs=None) -> StepRecord:
    """One REINFORCE step.

    ``mean_reward`` is the policy-value estimate before the update when
    ``behavior_probs`` is given, else the plain batch mean (also kept as
    ``logged_reward``, which does not depend on the policy).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if len(rewards) != len(inputs):
        raise ConfigError("rewards must align with the batch")
    z = net.logits(inputs, "train")
    lp = log_softmax(z)
    net._cache.probs = np.exp(lp)
    chosen = lp[np.arange(len(z)), np.asarray(actions, dtype=np.int64)]
    loss_value = float(-(rewards * chosen).mean())
    grads = net.backward(inputs, actions, rewards)
    norm = global_norm(grads)
    if not (math.isfinite(loss_value) and math.isfinite(norm)):
        raise NumericError(f"training diverged at step {step}: loss={loss_value} gradient_norm={norm}")
    net.apply_update(grads, step_size)
    logged = float(rewards.mean())
    value = logged if behavior_probs is None else policy_value(chosen, rewards, np.asarray(behavior_probs, dtype=np.float64))
    return StepRecord(step, loss_value, value, norm, logged)


def train_on_data(data: LogData, grid: ActionGrid, schema: FeatureSchema, config: TrainConfig) -> tuple[PolicyNet, TrainReport]:
    if len(data) == 0:
        raise SchemaError("cannot train on an empty log")
    data.check_schema(schema)
    if data.header.get("grid") and ActionGrid.from_dict(data.header["grid"]) != grid:
        raise SchemaError("log was collected on a different action grid")
    net = init(schema, grid, config.arch, config.seed)
    inputs = PolicyInputs.from_log(data)
    n, b = len(data), config.batch_size
    records: list[StepRecord] = []
    t0 = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        order = rngmod.stream(config.seed, epoch, "shuffle").permutation(n) if config.shuffle else np.arange(n)
        for start in range(0, n, b):
            idx = order[start : start + b]
            if len(idx) < 2:
                continue
            batch = data.subset(idx)
            r = batch_rewards(batch, config.reward_config)
            records.append(train_step(net, inputs.take(idx), batch.action, r, config.step_size, step, batch.bp))
            step += 1
    return net, TrainReport(records, time.perf_counter() - t0)


def train(log_path, grid: ActionGrid, schema: FeatureSchema, config: TrainConfig,
          checkpoint_path=None, metrics_path=None) -> tuple[PolicyNet, TrainReport]:
    data = read_log(log_path, schema)
    net, report = train_on_data(data, grid, schema, config)
    if checkpoint_path is not None:
        save(net, checkpoint_path, metadata={
            "seed": config.seed,
            "steps": report.n_steps,
            "reward_variant": config.reward_config.variant,
            "log_schema_hash": data.schema_hash,
        })
        report.checkpoint_path = str(checkpoint_path)
    if metrics_path is not None:
        report.write(metrics_path)
    return net, report
