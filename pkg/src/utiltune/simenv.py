"""Synthetic ad-request environment with latent user segments.

Each request belongs to one segment. The segment fixes the ground-truth
engagement rates; candidate ads scale those rates by per-ad affinities, and
the ranking stack sees them through multiplicative log-normal prediction
noise. Observable features (a noisy segment hint, noisy historical
CTR/CVR/CPM, a dense activity vector and a few irrelevant context ids) are
correlated with the segment so a policy can personalize.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import rng as rngmod
from .core import (
    Action,
    ActionGrid,
    AdBatch,
    AdCandidate,
    CampaignType,
    RewardConfig,
    decode_action,
    rank,
    reward_matrix,
    winners_batch,
)
from .errors import ConfigError

CONTEXT_CARDINALITIES = (("hour", 24), ("weekday", 7), ("country", 8))
NUMERICAL_NAMES = ("hist_ctr", "hist_cvr", "hist_cpm", "activity")
ENUMERATION_LIMIT = 10**6


# --- features ------------------------------------------------------------


@dataclass(frozen=True)
class CategoricalSpec:
    name: str
    cardinality: int


@dataclass(frozen=True)
class DenseSpec:
    name: str
    dimension: int


@dataclass(frozen=True)
class FeatureSchema:
    categorical_specs: tuple[CategoricalSpec, ...]
    numerical_names: tuple[str, ...]
    dense_specs: tuple[DenseSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "categorical_specs", tuple(self.categorical_specs))
        object.__setattr__(self, "numerical_names", tuple(self.numerical_names))
        object.__setattr__(self, "dense_specs", tuple(self.dense_specs))
        names = [c.name for c in self.categorical_specs] + list(self.numerical_names) + [d.name for d in self.dense_specs]
        if len(set(names)) != len(names):
            raise ConfigError("feature names must be unique")
        for c in self.categorical_specs:
            if c.cardinality < 2:
                raise ConfigError(f"categorical feature {c.name!r} needs cardinality >= 2")
        for d in self.dense_specs:
            if d.dimension < 1:
                raise ConfigError(f"dense feature {d.name!r} needs dimension >= 1")

    @property
    def cardinalities(self) -> list[int]:
        return [c.cardinality for c in self.categorical_specs]

    @property
    def dense_width(self) -> int:
        return sum(d.dimension for d in self.dense_specs)

    def to_dict(self) -> dict:
        return {
            "categorical": [[c.name, c.cardinality] for c in self.categorical_specs],
            "numerical": list(self.numerical_names),
            "dense": [[d.name, d.dimension] for d in self.dense_specs],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        return cls(
            tuple(CategoricalSpec(n, int(c)) for n, c in d["categorical"]),
            tuple(d["numerical"]),
            tuple(DenseSpec(n, int(k)) for n, k in d["dense"]),
        )

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class RequestState:
    categorical: tuple[int, ...]
    numerical: tuple[float, ...]
    dense: tuple[tuple[float, ...], ...]

    def validate(self, schema: FeatureSchema) -> None:
        if len(self.categorical) != len(schema.categorical_specs):
            raise ConfigError("categorical length does not match schema")
        for v, spec in zip(self.categorical, schema.categorical_specs):
            if not 0 <= v < spec.cardinality:
                raise ConfigError(f"{spec.name}={v} outside cardinality {spec.cardinality}")
        if len(self.numerical) != len(schema.numerical_names) or not all(map(math.isfinite, self.numerical)):
            raise ConfigError("numerical features do not match schema or are not finite")
        if [len(v) for v in self.dense] != [d.dimension for d in schema.dense_specs]:
            raise ConfigError("dense features do not match schema")


# --- configuration -------------------------------------------------------


@dataclass(frozen=True)
class UserSegment:
    segment_id: int
    ctr: float
    ctr30: float
    cvr: float
    cpm: float = 300.0
    weight: float = 1.0

    def __post_init__(self):
        for name in ("ctr", "ctr30", "cvr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"segment {self.segment_id}: {name}={v} outside [0, 1]")
        if self.ctr30 > self.ctr:
            raise ConfigError(f"segment {self.segment_id}: ctr30 must not exceed ctr")
        if self.cpm <= 0 or self.weight <= 0:
            raise ConfigError(f"segment {self.segment_id}: cpm and weight must be positive")


@dataclass(frozen=True)
class SimConfig:
    """Simulator parameters.

    The ad-generation knobs below the first block are simulator internals:
    ``affinity_sigma`` spreads per-ad rates around the segment rate,
    impression ads click at ``impression_ctr * ctr / (ctr + impression_ctr_half)``
    times their affinity, conversion ads click at ``conversion_click_affinity``
    times the segment rate, and click-through bids are divided by
    ``affinity ** bid_affinity_exponent`` (advertisers bid less per click for
    clickier creatives).
    """

    seed: int = 0
    segments: tuple[UserSegment, ...] = ()
    candidates_per_request: int = 20
    noise_sigma: float = 0.1
    campaign_mix: Mapping[CampaignType, float] = field(
        default_factory=lambda: {
            CampaignType.CLICK_THROUGH: 0.35,
            CampaignType.CONVERSION: 0.36,
            CampaignType.IMPRESSION: 0.29,
        }
    )
    bid_distributions: Mapping[CampaignType, tuple[float, float]] = field(
        default_factory=lambda: {
            CampaignType.CLICK_THROUGH: (0.5, 2.0),
            CampaignType.CONVERSION: (2.0, 12.0),
            CampaignType.IMPRESSION: (0.01, 0.2),
        }
    )
    exploration_fraction: float = 0.5
    exploration_cap: float = 0.5

    affinity_sigma: float = 0.6
    impression_ctr: float = 0.45
    impression_ctr_half: float = 0.01
    conversion_click_affinity: float = 0.6
    bid_affinity_exponent: float = 1.28

    hint_accuracy: float = 1.0
    observation_sigma: float = 0.88
    dense_dim: int = 4
    dense_sigma: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise ConfigError("at least one segment is required")
        ids = [s.segment_id for s in self.segments]
        if sorted(ids) != list(range(len(ids))):
            raise ConfigError("segment ids must be 0..n-1")
        mix = {c: float(self.campaign_mix.get(c, 0.0)) for c in CampaignType}
        if min(mix.values()) < 0 or abs(sum(mix.values()) - 1.0) > 1e-9:
            raise ConfigError("campaign_mix must be non-negative and sum to 1")
        object.__setattr__(self, "campaign_mix", mix)
        bids = {c: tuple(map(float, self.bid_distributions[c])) for c in CampaignType}
        for c, (lo, hi) in bids.items():
            if lo < 0 or hi < lo:
                raise ConfigError(f"bid range for {c.value} must satisfy 0 <= lo <= hi")
        object.__setattr__(self, "bid_distributions", bids)
        if self.candidates_per_request < 1:
            raise ConfigError("candidates_per_request must be >= 1")
        if self.noise_sigma < 0 or self.affinity_sigma < 0 or self.observation_sigma < 0 or self.dense_sigma < 0:
            raise ConfigError("noise scales must be non-negative")
        if not 0 < self.exploration_fraction <= 100:
            raise ConfigError("exploration_fraction must be in (0, 100]")
        if self.exploration_fraction > self.exploration_cap:
            raise ConfigError(
                f"exploration_fraction {self.exploration_fraction} exceeds exploration_cap {self.exploration_cap}"
            )
        if not 0 <= self.hint_accuracy <= 1:
            raise ConfigError("hint_accuracy must be in [0, 1]")
        if self.dense_dim < 1:
            raise ConfigError("dense_dim must be >= 1")

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def schema(self) -> FeatureSchema:
        cats = (CategoricalSpec("segment_hint", max(2, self.n_segments)),) + tuple(
            CategoricalSpec(n, c) for n, c in CONTEXT_CARDINALITIES
        )
        return FeatureSchema(cats, NUMERICAL_NAMES, (DenseSpec("activity_embedding", self.dense_dim),))


def desk_segments() -> tuple[UserSegment, ...]:
    """Low/high CTR crossed with low/high CVR."""
    return (
        UserSegment(0, ctr=0.024, ctr30=0.012, cvr=0.003, cpm=150.0),
        UserSegment(1, ctr=0.024, ctr30=0.012, cvr=0.023, cpm=300.0),
        UserSegment(2, ctr=0.26, ctr30=0.13, cvr=0.003, cpm=600.0),
        UserSegment(3, ctr=0.26, ctr30=0.13, cvr=0.023, cpm=900.0),
    )


# --- requests ------------------------------------------------------------


@dataclass
class RequestBatch:
    """Many simulated requests as arrays; row i is request ``rid[i]``."""

    rid: np.ndarray
    segment: np.ndarray
    cat: np.ndarray
    num: np.ndarray
    dense: np.ndarray
    ads: AdBatch
    true_click: np.ndarray
    true_click30: np.ndarray
    true_conversion: np.ndarray

    def __len__(self) -> int:
        return len(self.rid)


@dataclass(frozen=True)
class SimRequest:
    state: RequestState
    candidates: tuple[AdCandidate, ...]
    segment_id: int
    true_rates: np.ndarray  # (n_candidates, 3): click, click30, conversion

    def __iter__(self):
        return iter((self.state, self.candidates, self.segment_id))


def _lognormal(rng: np.random.Generator, sigma: float, size) -> np.ndarray:
    z = rng.standard_normal(size)
    return np.exp(sigma * z)


def _draw(config: SimConfig, g: np.random.Generator, segment: int | None):
    """One request's raw arrays. Draw order is fixed; changing it changes every log."""
    k = config.candidates_per_request
    weights = np.array([s.weight for s in config.segments])
    u_seg = g.random()
    if segment is None:
        segment = int(np.searchsorted(np.cumsum(weights) / weights.sum(), u_seg, side="right"))
        segment = min(segment, config.n_segments - 1)
    seg = config.segments[segment]

    # features
    n_seg = config.n_segments
    hint_ok = g.random() < config.hint_accuracy
    wrong = int(g.integers(0, max(1, n_seg - 1)))
    hint = segment if hint_ok or n_seg == 1 else (wrong if wrong < segment else wrong + 1)
    context = [int(g.integers(0, c)) for _, c in CONTEXT_CARDINALITIES]
    obs = _lognormal(g, config.observation_sigma, 4)
    num = np.array([seg.ctr * obs[0], seg.cvr * obs[1], seg.cpm * obs[2], obs[3]])
    center = np.array(
        [math.log(max(seg.ctr, 1e-4)), math.log(max(seg.cvr, 1e-5)), math.log(seg.cpm), math.log(max(seg.ctr30, 1e-4))]
    )
    center = np.resize(center, config.dense_dim)
    dense = center + config.dense_sigma * g.standard_normal(config.dense_dim)

    # ads
    mix = np.array([config.campaign_mix[c] for c in (CampaignType.CLICK_THROUGH, CampaignType.CONVERSION, CampaignType.IMPRESSION)])
    camp = np.minimum(np.searchsorted(np.cumsum(mix), g.random(k) * mix.sum(), side="right"), 2)
    aff_click = _lognormal(g, config.affinity_sigma, k)
    aff_conv = _lognormal(g, config.affinity_sigma, k)
    imp_base = config.impression_ctr * seg.ctr / (seg.ctr + config.impression_ctr_half) if seg.ctr > 0 else 0.0
    base = np.select(
        [camp == 0, camp == 1],
        [seg.ctr, seg.ctr * config.conversion_click_affinity],
        imp_base,
    )
    t_click = np.clip(base * aff_click, 0.0, 1.0)
    ratio30 = seg.ctr30 / seg.ctr if seg.ctr > 0 else 0.0
    t_click30 = t_click * ratio30
    t_conv = np.clip(seg.cvr * aff_conv, 0.0, 1.0)
    lo = np.array([config.bid_distributions[c][0] for c in _CODES])
    hi = np.array([config.bid_distributions[c][1] for c in _CODES])
    bid = lo[camp] + (hi[camp] - lo[camp]) * g.random(k)
    bid = np.where(camp == 0, bid / aff_click**config.bid_affinity_exponent, bid)

    noise = _lognormal(g, config.noise_sigma, (3, k))
    p_click = np.clip(t_click * noise[0], 0.0, 1.0)
    p_click30 = np.minimum(np.clip(t_click30 * noise[1], 0.0, 1.0), p_click)
    p_conv = np.clip(t_conv * noise[2], 0.0, 1.0)
    cat = np.array([hint, *context], dtype=np.int64)
    return segment, cat, num, dense, camp, p_click, p_click30, p_conv, bid, t_click, t_click30, t_conv


_CODES = (CampaignType.CLICK_THROUGH, CampaignType.CONVERSION, CampaignType.IMPRESSION)


def generate_request(config: SimConfig, rng_stream: np.random.Generator, segment: int | None = None) -> SimRequest:
    seg, cat, num, dense, camp, pc, p30, pv, bid, tc, t30, tv = _draw(config, rng_stream, segment)
    ads = tuple(
        AdCandidate(f"ad{j}", CampaignType.from_code(int(camp[j])), float(pc[j]), float(p30[j]), float(pv[j]), float(bid[j]))
        for j in range(len(camp))
    )
    state = RequestState(tuple(int(c) for c in cat), tuple(float(x) for x in num), (tuple(float(x) for x in dense),))
    return SimRequest(state, ads, seg, np.stack([tc, t30, tv], axis=1))


def simulate_requests(
    config: SimConfig, request_ids: Sequence[int], purpose: str = "request", segment: int | None = None
) -> RequestBatch:
    rids = np.asarray(request_ids, dtype=np.int64)
    extra = () if segment is None else (segment,)
    rows = [_draw(config, rngmod.stream(config.seed, int(r), purpose, *extra), segment) for r in rids]
    if not rows:
        raise ConfigError("no requests to simulate")
    cols = list(zip(*rows))
    ads = AdBatch(
        campaign=np.stack(cols[4]).astype(np.int64),
        p_click=np.stack(cols[5]),
        p_click30=np.stack(cols[6]),
        p_conversion=np.stack(cols[7]),
        bid=np.stack(cols[8]),
    )
    return RequestBatch(
        rid=rids,
        segment=np.array(cols[0], dtype=np.int64),
        cat=np.stack(cols[1]),
        num=np.stack(cols[2]),
        dense=np.stack(cols[3]),
        ads=ads,
        true_click=np.stack(cols[9]),
        true_click30=np.stack(cols[10]),
        true_conversion=np.stack(cols[11]),
    )


# --- behavior policies ---------------------------------------------------


def _phi(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@dataclass(frozen=True)
class BehaviorPolicy:
    """Uniform over the grid, or a discretized Gaussian in grid-index units.

    For the Gaussian, ``mu`` holds per-group center indices and ``sigma`` the
    per-group standard deviation, both measured in grid steps. A draw is
    rounded to the nearest index and clamped, so the end points absorb the
    tail mass.
    """

    kind: str = "uniform"
    mu: tuple[float, ...] = ()
    sigma: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("uniform", "gaussian"):
            raise ConfigError(f"unknown behavior policy {self.kind!r}")
        if self.kind == "gaussian":
            if len(self.mu) != len(self.sigma) or not self.mu:
                raise ConfigError("gaussian policy needs one mu and sigma per group")
            if min(self.sigma) <= 0:
                raise ConfigError("gaussian sigma must be > 0")

    @classmethod
    def uniform(cls) -> "BehaviorPolicy":
        return cls("uniform")

    @classmethod
    def gaussian(cls, grid: ActionGrid, mu: Action | None = None, sigma: float | Sequence[float] | None = None):
        mu = mu or grid.midpoint_action()
        if sigma is None:
            sigma = (grid.m - 1) / 4.0
        sig = tuple(float(s) for s in np.broadcast_to(np.asarray(sigma, dtype=float), (grid.g,)))
        return cls("gaussian", tuple(float(i) for i in mu.group_indices), sig)

    def check(self, grid: ActionGrid) -> None:
        if self.kind == "gaussian" and len(self.mu) != grid.g:
            raise ConfigError(f"gaussian policy has {len(self.mu)} groups, grid has {grid.g}")

    def group_masses(self, grid: ActionGrid) -> list[np.ndarray]:
        m = grid.m
        if self.kind == "uniform":
            return [np.full(m, 1.0 / m) for _ in range(grid.g)]
        self.check(grid)
        out = []
        for mu, s in zip(self.mu, self.sigma):
            cdf = np.array([_phi((k + 0.5 - mu) / s) for k in range(m - 1)])
            upper = 1.0 - np.array([_phi((k - 0.5 - mu) / s) for k in range(1, m)])
            mass = np.empty(m)
            mass[0] = cdf[0]
            mass[1:-1] = np.diff(cdf)
            mass[-1] = upper[-1]
            out.append(mass)
        return out

    def probabilities(self, grid: ActionGrid) -> np.ndarray:
        """Probability of every flat action (most-significant group first)."""
        if self.kind == "uniform":
            return np.full(grid.n_actions, 1.0 / grid.n_actions)
        p = np.ones(1)
        for mass in self.group_masses(grid):
            p = np.outer(p, mass).ravel()
        return p

    def prob(self, grid: ActionGrid, a: Action) -> float:
        if self.kind == "uniform":
            return 1.0 / grid.n_actions
        return float(np.prod([mass[k] for mass, k in zip(self.group_masses(grid), a.group_indices)]))


def _nearest_index(x: float, m: int) -> int:
    return int(min(max(math.floor(x + 0.5), 0), m - 1))


def behavior_sample(policy: BehaviorPolicy, grid: ActionGrid, rng_stream: np.random.Generator) -> tuple[Action, float]:
    if policy.kind == "uniform":
        a = grid.action(int(rng_stream.integers(0, grid.n_actions)))
        return a, 1.0 / grid.n_actions
    policy.check(grid)
    idx = [_nearest_index(rng_stream.normal(mu, s), grid.m) for mu, s in zip(policy.mu, policy.sigma)]
    a = grid.encode(idx)
    return a, policy.prob(grid, a)


# --- stepping ------------------------------------------------------------


@dataclass(frozen=True)
class WinnerRaw:
    campaign: CampaignType
    p_click: float
    p_click30: float
    p_conversion: float
    bid: float

    def as_candidate(self) -> AdCandidate:
        return AdCandidate("winner", self.campaign, self.p_click, self.p_click30, self.p_conversion, self.bid)


@dataclass(frozen=True)
class Realized:
    clicked: bool = False
    clicked30: bool = False
    converted: bool = False
    revenue: float = 0.0


@dataclass(frozen=True)
class LoggedTriplet:
    request_id: int
    state: RequestState
    action_flat_index: int
    behavior_prob: float
    winner_raw: WinnerRaw | None
    realized: Realized


def realize(campaign: int, bid: float, rates: Sequence[float], u: Sequence[float]) -> Realized:
    """Sample engagement from true rates using three uniforms."""
    tc, t30, tv = rates
    clicked = bool(u[0] < tc)
    clicked30 = bool(clicked and tc > 0 and u[1] < t30 / tc)
    converted = bool(u[2] < tv)
    if campaign == CampaignType.CLICK_THROUGH.code:
        revenue = bid if clicked else 0.0
    elif campaign == CampaignType.CONVERSION.code:
        revenue = bid if converted else 0.0
    else:
        revenue = bid
    return Realized(clicked, clicked30, converted, float(revenue))


def step(
    request: SimRequest,
    action: Action,
    grid: ActionGrid,
    rng_stream: np.random.Generator,
    behavior_prob: float = 1.0,
    request_id: int = 0,
) -> LoggedTriplet:
    params = decode_action(grid, action)
    winner = rank(request.candidates, params)
    u = rng_stream.random(3)
    if winner is None:
        return LoggedTriplet(request_id, request.state, action.flat_index, behavior_prob, None, Realized())
    j = next(i for i, c in enumerate(request.candidates) if c is winner)
    raw = WinnerRaw(winner.campaign, winner.p_click, winner.p_click30, winner.p_conversion, winner.bid)
    real = realize(winner.campaign.code, winner.bid, request.true_rates[j], u)
    return LoggedTriplet(request_id, request.state, action.flat_index, behavior_prob, raw, real)


@dataclass
class StepResult:
    """Vectorized outcome of running one action per request."""

    winner: np.ndarray  # candidate position or -1
    campaign: np.ndarray
    p_click: np.ndarray
    p_click30: np.ndarray
    p_conversion: np.ndarray
    bid: np.ndarray
    clicked: np.ndarray
    clicked30: np.ndarray
    converted: np.ndarray
    revenue: np.ndarray

    @property
    def has_winner(self) -> np.ndarray:
        return self.winner >= 0


def outcome_uniforms(config: SimConfig, request_ids: Sequence[int], purpose: str = "outcome") -> np.ndarray:
    return np.stack([rngmod.stream(config.seed, int(r), purpose).random(3) for r in request_ids])


def step_batch(batch: RequestBatch, grid: ActionGrid, flat_actions, uniforms: np.ndarray) -> StepResult:
    weights, reserve = grid.decode_arrays(flat_actions)
    w = winners_batch(batch.ads, weights, reserve)
    ok = w >= 0
    rows = np.arange(len(w))
    col = np.where(ok, w, 0)

    def pick(arr, fill=0.0):
        return np.where(ok, arr[rows, col], fill)

    camp = np.where(ok, batch.ads.campaign[rows, col], -1)
    bid = pick(batch.ads.bid)
    tc, t30, tv = pick(batch.true_click), pick(batch.true_click30), pick(batch.true_conversion)
    clicked = ok & (uniforms[:, 0] < tc)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond30 = np.where(tc > 0, t30 / np.where(tc > 0, tc, 1.0), 0.0)
    clicked30 = clicked & (uniforms[:, 1] < cond30)
    converted = ok & (uniforms[:, 2] < tv)
    revenue = np.select(
        [camp == CampaignType.CLICK_THROUGH.code, camp == CampaignType.CONVERSION.code, camp == CampaignType.IMPRESSION.code],
        [np.where(clicked, bid, 0.0), np.where(converted, bid, 0.0), bid],
        0.0,
    )
    return StepResult(
        w, camp, pick(batch.ads.p_click), pick(batch.ads.p_click30), pick(batch.ads.p_conversion), bid,
        clicked, clicked30, converted, revenue,
    )


def expected_rewards(batch: RequestBatch, grid: ActionGrid, flat_actions, reward_config: RewardConfig) -> np.ndarray:
    """Raw (unnormalized) estimated reward of each request's winner; 0 when gated."""
    weights, reserve = grid.decode_arrays(flat_actions)
    w = winners_batch(batch.ads, weights, reserve)
    rev, uv = reward_matrix(batch.ads, reward_config)
    rows = np.arange(len(w))
    col = np.where(w >= 0, w, 0)
    return np.where(w >= 0, rev[rows, col] + uv[rows, col], 0.0)


# --- collection ----------------------------------------------------------


def exploration_count(n: int, fraction_percent: float) -> int:
    return math.ceil(Fraction(str(fraction_percent)) * n / 100)


def exploration_ids(config: SimConfig, n: int) -> np.ndarray:
    k = exploration_count(n, config.exploration_fraction)
    if k >= n:
        return np.arange(n, dtype=np.int64)
    perm = rngmod.stream(config.seed, 0, "split", n).permutation(n)
    return np.sort(perm[:k])


def _sample_actions(policy: BehaviorPolicy, grid: ActionGrid, config: SimConfig, rids) -> tuple[np.ndarray, np.ndarray]:
    acts, probs = [], []
    for r in rids:
        a, p = behavior_sample(policy, grid, rngmod.stream(config.seed, int(r), "behavior"))
        acts.append(a.flat_index)
        probs.append(p)
    return np.array(acts, dtype=np.int64), np.array(probs)


def collect(
    config: SimConfig, grid: ActionGrid, policy: BehaviorPolicy, count: int, chunk: int = 4096
) -> Iterator[LoggedTriplet]:
    """Yield the exploration triplets out of ``count`` simulated requests.

    Requests outside the exploration slice would be served with the
    production-default action and never reach the log, so they are not
    simulated at all.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    policy.check(grid)
    ids = exploration_ids(config, count)
    for start in range(0, len(ids), chunk):
        rids = ids[start : start + chunk]
        batch = simulate_requests(config, rids)
        acts, probs = _sample_actions(policy, grid, config, rids)
        res = step_batch(batch, grid, acts, outcome_uniforms(config, rids))
        for i, r in enumerate(rids):
            state = RequestState(
                tuple(int(c) for c in batch.cat[i]),
                tuple(float(x) for x in batch.num[i]),
                (tuple(float(x) for x in batch.dense[i]),),
            )
            if res.winner[i] >= 0:
                raw = WinnerRaw(
                    CampaignType.from_code(int(res.campaign[i])),
                    float(res.p_click[i]), float(res.p_click30[i]), float(res.p_conversion[i]), float(res.bid[i]),
                )
                real = Realized(bool(res.clicked[i]), bool(res.clicked30[i]), bool(res.converted[i]), float(res.revenue[i]))
            else:
                raw, real = None, Realized()
            yield LoggedTriplet(int(r), state, int(acts[i]), float(probs[i]), raw, real)


# --- oracle --------------------------------------------------------------


def constant_action_values(batch: RequestBatch, grid: ActionGrid, reward_config: RewardConfig, chunk: int = 100) -> np.ndarray:
    """Mean raw expected reward over ``batch`` of every constant action."""
    if grid.n_actions > ENUMERATION_LIMIT:
        raise ConfigError(f"grid has {grid.n_actions} actions, above the enumeration limit {ENUMERATION_LIMIT}")
    rev, uv = reward_matrix(batch.ads, reward_config)
    value = rev + uv
    est = batch.ads.estimated_revenue()
    n = len(batch)
    out = np.empty(grid.n_actions)
    for start in range(0, grid.n_actions, chunk):
        acts = np.arange(start, min(start + chunk, grid.n_actions))
        weights, reserve = grid.decode_arrays(acts)
        eng = sum(
            batch.ads.prob(ch)[None, :, :] * weights[w][:, None, None]
            for w, ch in (("w_click", "p_click"), ("w_click30", "p_click30"), ("w_conversion", "p_conversion"))
        )
        passes = est[None] >= reserve[:, None, None]
        u = np.where(passes, est[None] + eng, -np.inf)
        idx = np.argmax(u, axis=2)
        ok = np.take_along_axis(passes, idx[..., None], axis=2)[..., 0]
        val = np.take_along_axis(np.broadcast_to(value, u.shape), idx[..., None], axis=2)[..., 0]
        out[acts] = np.where(ok, val, 0.0).sum(axis=1) / n
    return out


def action_values(
    config: SimConfig, grid: ActionGrid, segment_id: int, reward_config: RewardConfig, n_eval: int
) -> np.ndarray:
    """Mean expected reward of every constant action on fresh requests from one segment."""
    if grid.n_actions > ENUMERATION_LIMIT:
        raise ConfigError(f"grid has {grid.n_actions} actions, above the enumeration limit {ENUMERATION_LIMIT}")
    if not 0 <= segment_id < config.n_segments:
        raise ConfigError(f"unknown segment {segment_id}")
    if n_eval < 1:
        raise ConfigError("n_eval must be >= 1")
    batch = simulate_requests(config, range(n_eval), "oracle", segment=segment_id)
    return constant_action_values(batch, grid, reward_config)


def oracle_best_action(
    config: SimConfig, grid: ActionGrid, segment_id: int, reward_config: RewardConfig, n_eval: int
) -> tuple[Action, float]:
    values = action_values(config, grid, segment_id, reward_config, n_eval)
    best = int(np.argmax(values))  # first maximum, so lowest flat index on ties
    return grid.action(best), float(values[best])
