"""Offline gates, simulator-based policy measurement, ablations and bucket reports."""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import ActionGrid, RewardConfig, decode_action
from .errors import ConfigError, SchemaError, UtilTuneError
from .logfile import LogData
from .policy import PolicyInputs, PolicyNet
from .simenv import (
    BehaviorPolicy,
    FeatureSchema,
    SimConfig,
    constant_action_values,
    expected_rewards,
    NUMERICAL_NAMES,
    oracle_best_action,
    outcome_uniforms,
    simulate_requests,
    step_batch,
)
from .train import TrainConfig, batch_rewards, train_on_data

DEFAULT_THRESHOLD = 0.1
BUCKET_KEYS = {"ctr": "hist_ctr", "cvr": "hist_cvr", "cpm": "hist_cpm"}


# --- gates ---------------------------------------------------------------


def diversity(predicted_actions: Sequence[int]) -> float:
    preds = list(predicted_actions)
    if not preds:
        raise ConfigError("diversity needs at least one prediction")
    mode_count = max(Counter(preds).values())
    return 1.0 - mode_count / len(preds)


def relative_gain_terms(rewards, policy_probs, behavior_probs) -> float:
    r = np.asarray(rewards, dtype=np.float64)
    return float(np.sum(r * (np.asarray(policy_probs, dtype=np.float64) - np.asarray(behavior_probs, dtype=np.float64))))


def relative_gain(data: LogData, net: PolicyNet, reward_config: RewardConfig) -> float:
    """Sum over the log of r_i * (pi(a_i|s_i) - pi_B(a_i|s_i)), pi in eval mode.

    Rewards are recomputed under ``reward_config``; with normalization on the
    whole log is treated as one batch.
    """
    if len(data) == 0:
        raise SchemaError("relative_gain needs a non-empty log")
    data.check_schema(net.schema)
    r = batch_rewards(data, reward_config)
    pi = np.exp(net.log_probs(PolicyInputs.from_log(data), data.action, "eval"))
    return relative_gain_terms(r, pi, data.bp)


@dataclass(frozen=True)
class EvalReport:
    diversity: float
    relative_gain: float
    diversity_threshold: float
    verdict: str
    oracle_ratio: float | None = None

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def summary(self) -> str:
        line = f"verdict={self.verdict} diversity={self.diversity!r} relative_gain={self.relative_gain!r}"
        if self.oracle_ratio is not None:
            line += f" oracle_ratio={self.oracle_ratio!r}"
        return line


def verdict(div: float, gain: float, t: float) -> str:
    return "pass" if div >= t and gain > 0 else "fail"


def gate(net: PolicyNet, data: LogData, t: float = DEFAULT_THRESHOLD, reward_config: RewardConfig | None = None,
         oracle_ratio: float | None = None) -> EvalReport:
    reward_config = reward_config or RewardConfig()
    preds = net.greedy(PolicyInputs.from_log(data))
    div = diversity(preds.tolist())
    gain = relative_gain(data, net, reward_config)
    return EvalReport(div, gain, t, verdict(div, gain, t), oracle_ratio)


# --- simulation ----------------------------------------------------------


@dataclass(frozen=True)
class SimMetrics:
    revenue: float
    impressions: int
    ctr: float
    ctr30: float
    cvr: float
    requests: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SimResult:
    metrics: SimMetrics
    mean_expected_reward: float
    actions: np.ndarray
    expected: np.ndarray = field(repr=False, default=None)


def eval_requests(sim_config: SimConfig, n_requests: int):
    if n_requests < 1:
        raise ConfigError("simulation needs at least one request")
    batch = simulate_requests(sim_config, range(n_requests), "eval")
    uniforms = outcome_uniforms(sim_config, range(n_requests), "eval_outcome")
    return batch, uniforms


def batch_inputs(batch) -> PolicyInputs:
    return PolicyInputs(batch.cat, batch.num, batch.dense)


def metrics_for_actions(batch, uniforms, grid: ActionGrid, actions, reward_config: RewardConfig) -> SimResult:
    res = step_batch(batch, grid, actions, uniforms)
    imps = int(res.has_winner.sum())
    clicks = int(res.clicked.sum())
    metrics = SimMetrics(
        revenue=float(res.revenue.sum()),
        impressions=imps,
        ctr=clicks / imps if imps else 0.0,
        ctr30=int(res.clicked30.sum()) / imps if imps else 0.0,
        cvr=int(res.converted.sum()) / imps if imps else 0.0,
        requests=len(batch),
    )
    exp = expected_rewards(batch, grid, actions, reward_config)
    return SimResult(metrics, float(exp.mean()), np.asarray(actions), exp)


def simulate_policy(net: PolicyNet, sim_config: SimConfig, grid: ActionGrid, n_requests: int,
                    reward_config: RewardConfig, requests=None) -> SimResult:
    """Greedy eval-mode actions on fresh requests: realized metrics plus mean expected reward."""
    batch, uniforms = requests if requests is not None else eval_requests(sim_config, n_requests)
    actions = net.greedy(batch_inputs(batch))
    return metrics_for_actions(batch, uniforms, grid, actions, reward_config)


@dataclass(frozen=True)
class QualityReport:
    policy_mean: float
    oracle_mean: float
    uniform_mean: float
    oracle_actions: tuple[int, ...]

    @property
    def oracle_ratio(self) -> float:
        return self.policy_mean / self.oracle_mean

    @property
    def uniform_ratio(self) -> float:
        return self.policy_mean / self.uniform_mean


def oracle_actions(sim_config: SimConfig, grid: ActionGrid, reward_config: RewardConfig, n_eval: int) -> list[int]:
    return [oracle_best_action(sim_config, grid, s, reward_config, n_eval)[0].flat_index
            for s in range(sim_config.n_segments)]


def policy_quality(net: PolicyNet, sim_config: SimConfig, grid: ActionGrid, reward_config: RewardConfig,
                   n_requests: int = 10_000, n_oracle: int = 2_000) -> QualityReport:
    """Policy, per-segment oracle and uniform behavior scored on the same fresh requests."""
    batch, uniforms = eval_requests(sim_config, n_requests)
    pol = simulate_policy(net, sim_config, grid, n_requests, reward_config, (batch, uniforms))
    best = oracle_actions(sim_config, grid, reward_config, n_oracle)
    orc = expected_rewards(batch, grid, np.array(best)[batch.segment], reward_config)
    uni = constant_action_values(batch, grid, reward_config).mean()
    return QualityReport(pol.mean_expected_reward, float(orc.mean()), float(uni), tuple(best))


# --- ablation ------------------------------------------------------------


@dataclass
class AblationRow:
    variant: str
    metrics: SimMetrics | None
    mean_expected_reward: float | None
    error: str | None = None


@dataclass
class AblationResult:
    rows: list[AblationRow]

    def row(self, variant: str) -> AblationRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def deltas(self, base: str | None = None) -> list[dict]:
        """Relative change of each variant's metrics against ``base`` (default: first row)."""
        base_row = self.row(base) if base else self.rows[0]
        out = []
        for r in self.rows:
            if r is base_row or r.metrics is None or base_row.metrics is None:
                continue
            d = {"variant": r.variant, "base": base_row.variant}
            for k in ("revenue", "ctr", "ctr30", "cvr", "impressions"):
                b, v = getattr(base_row.metrics, k), getattr(r.metrics, k)
                d[k] = (v - b) / b if b else float("nan")
            out.append(d)
        return out

    def write_csv(self, path) -> None:
        cols = ["variant", "revenue", "impressions", "ctr", "ctr30", "cvr", "mean_expected_reward",
                "d_revenue", "d_ctr", "d_ctr30", "d_cvr", "error"]
        deltas = {d["variant"]: d for d in self.deltas()}
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                m = r.metrics
                d = deltas.get(r.variant, {})
                w.writerow([
                    r.variant,
                    *( [repr(m.revenue), m.impressions, repr(m.ctr), repr(m.ctr30), repr(m.cvr)] if m else [""] * 5 ),
                    repr(r.mean_expected_reward) if r.mean_expected_reward is not None else "",
                    *[repr(d[k]) if k in d else "" for k in ("revenue", "ctr", "ctr30", "cvr")],
                    r.error or "",
                ])


def ablation_run(variants: Sequence[RewardConfig], data: LogData, sim_config: SimConfig, grid: ActionGrid,
                 schema: FeatureSchema, train_config: TrainConfig, n_requests: int = 10_000) -> AblationResult:
    if len(variants) < 2:
        raise ConfigError("ablation needs at least two reward variants")
    requests = eval_requests(sim_config, n_requests)
    rows = []
    for rc in variants:
        cfg = TrainConfig(train_config.step_size, train_config.batch_size, train_config.epochs,
                          train_config.seed, rc, train_config.shuffle, train_config.arch)
        try:
            net, _ = train_on_data(data, grid, schema, cfg)
            res = simulate_policy(net, sim_config, grid, n_requests, rc, requests)
            rows.append(AblationRow(rc.variant, res.metrics, res.mean_expected_reward))
        except UtilTuneError as exc:
            rows.append(AblationRow(rc.variant, None, None, str(exc)))
    return AblationResult(rows)


# --- bucket reports ------------------------------------------------------


@dataclass(frozen=True)
class Bucket:
    low: float
    high: float
    w_click: float
    w_conversion: float
    reserve: float
    count: int


@dataclass(frozen=True)
class BucketReport:
    bucket_key: str
    buckets: tuple[Bucket, ...]

    def column(self, name: str) -> list[float]:
        return [getattr(b, name) for b in self.buckets]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bucket", "key_low", "key_high", "mean_w_click", "mean_w_conversion", "mean_reserve", "count"])
            for i, b in enumerate(self.buckets):
                w.writerow([i, repr(b.low), repr(b.high), repr(b.w_click), repr(b.w_conversion), repr(b.reserve), b.count])

    def write_svg(self, path, width: int = 640, height: int = 360) -> None:
        write_bucket_svg(self, path, width, height)


def decoded_values(grid: ActionGrid, actions) -> dict[str, np.ndarray]:
    weights, reserve = grid.decode_arrays(actions)
    return {"w_click": weights["w_click"], "w_conversion": weights["w_conversion"], "reserve": reserve}


def bucket_report(net: PolicyNet, inputs: PolicyInputs, keys, grid: ActionGrid, key: str = "ctr",
                  n_buckets: int = 4) -> BucketReport:
    """Equal-population buckets over ``keys``; per bucket the mean decoded greedy parameters."""
    keys = np.asarray(keys, dtype=np.float64)
    if n_buckets < 2:
        raise ConfigError("n_buckets must be >= 2")
    if len(keys) < n_buckets:
        raise ConfigError(f"population of {len(keys)} is smaller than n_buckets={n_buckets}")
    actions = net.greedy(inputs)
    vals = decoded_values(grid, actions)
    order = np.argsort(keys, kind="stable")
    buckets = []
    for idx in np.array_split(order, n_buckets):
        buckets.append(Bucket(
            float(keys[idx].min()), float(keys[idx].max()),
            float(vals["w_click"][idx].mean()), float(vals["w_conversion"][idx].mean()),
            float(vals["reserve"][idx].mean()), int(len(idx)),
        ))
    return BucketReport(key, tuple(buckets))


def population_report(net: PolicyNet, sim_config: SimConfig, grid: ActionGrid, key: str, n_requests: int,
                      n_buckets: int = 4) -> BucketReport:
    if key not in BUCKET_KEYS:
        raise ConfigError(f"unknown bucket key {key!r}; choose from {sorted(BUCKET_KEYS)}")
    batch = simulate_requests(sim_config, range(n_requests), "eval")
    col = NUMERICAL_NAMES.index(BUCKET_KEYS[key])
    return bucket_report(net, batch_inputs(batch), batch.num[:, col], grid, key, n_buckets)


def write_bucket_svg(report: BucketReport, path, width: int = 640, height: int = 360) -> None:
    """Line chart of mean decoded parameters per bucket; each series scaled to its own max."""
    series = [("w_click", "#1f77b4"), ("w_conversion", "#2ca02c"), ("reserve", "#d62728")]
    pad = 60
    n = len(report.buckets)
    xs = [pad + i * (width - 2 * pad) / max(1, n - 1) for i in range(n)]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">'
        f"mean decoded parameters by historical {report.bucket_key} bucket</text>",
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for i, x in enumerate(xs):
        parts.append(f'<text x="{x:.1f}" y="{height - pad + 18}" text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11">b{i}</text>')
    for j, (name, color) in enumerate(series):
        vals = report.column(name)
        top = max(vals) or 1.0
        pts = " ".join(f"{x:.1f},{height - pad - (v / top) * (height - 2 * pad):.1f}" for x, v in zip(xs, vals))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{pad + 175 * j}" y="42" font-family="sans-serif" font-size="11" '
                     f'fill="{color}">{name} (max {top:.3g})</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
