"""Ranking utility, discretized action grid and the reward family.

Everything here is a pure function of its inputs. Scalar operations work on
:class:`AdCandidate` objects; the ``*_batch`` helpers apply the same formulas
to ``(n_requests, n_candidates)`` arrays and are what the simulator and the
brute-force oracle use.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, InvalidActionError

WEIGHT_CHANNELS = {
    "w_click": "p_click",
    "w_click30": "p_click30",
    "w_conversion": "p_conversion",
}
CHANNELS = ("p_click", "p_click30", "p_conversion")


class CampaignType(enum.Enum):
    CLICK_THROUGH = "clickthrough"
    CONVERSION = "conversion"
    IMPRESSION = "impression"

    @property
    def code(self) -> int:
        return _CAMPAIGN_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "CampaignType":
        return _CAMPAIGNS[code]

    @classmethod
    def parse(cls, token: str) -> "CampaignType":
        try:
            return cls(token)
        except ValueError:
            raise ConfigError(f"unknown campaign type {token!r}") from None


_CAMPAIGNS = (CampaignType.CLICK_THROUGH, CampaignType.CONVERSION, CampaignType.IMPRESSION)
_CAMPAIGN_CODES = {c: i for i, c in enumerate(_CAMPAIGNS)}


@dataclass(frozen=True)
class AdCandidate:
    ad_id: str
    campaign: CampaignType
    p_click: float
    p_click30: float
    p_conversion: float
    bid: float

    def __post_init__(self):
        for name in CHANNELS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.p_click30 > self.p_click:
            raise ValueError("p_click30 must not exceed p_click")
        if self.bid < 0:
            raise ValueError("bid must be non-negative")

    def prob(self, channel: str) -> float:
        return getattr(self, channel)


@dataclass(frozen=True)
class GroupSpec:
    name: str
    member_weights: tuple[str, ...]
    min: float
    max: float

    def __post_init__(self):
        object.__setattr__(self, "member_weights", tuple(self.member_weights))
        if self.min < 0 or not self.max > self.min:
            raise ConfigError(f"group {self.name!r}: need 0 <= min < max, got [{self.min}, {self.max}]")
        for w in self.member_weights:
            if w not in WEIGHT_CHANNELS:
                raise ConfigError(f"group {self.name!r}: unknown engagement weight {w!r}")


@dataclass(frozen=True)
class Action:
    group_indices: tuple[int, ...]
    flat_index: int


@dataclass(frozen=True)
class UtilityParams:
    reserve_price: float
    weights: Mapping[str, float]

    def weight(self, name: str) -> float:
        return self.weights.get(name, 0.0)


@dataclass(frozen=True)
class ActionGrid:
    """Grouped, equally spaced hyperparameter grid.

    ``groups`` hold the engagement weights; every weight named in a group
    shares that group's value. ``reserve`` is the group for the reserve price
    and is encoded last. Weights not named in any group are fixed at 0.
    """

    groups: tuple[GroupSpec, ...]
    values_per_group: int
    reserve: GroupSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if self.values_per_group < 2:
            raise ConfigError("values_per_group must be >= 2")
        seen: set[str] = set()
        for g in self.groups:
            for w in g.member_weights:
                if w in seen:
                    raise ConfigError(f"engagement weight {w!r} appears in more than one group")
                seen.add(w)
        if self.reserve is not None and self.reserve.member_weights:
            raise ConfigError("reserve group must not list engagement weights")
        names = [g.name for g in self.all_groups]
        if len(set(names)) != len(names):
            raise ConfigError("group names must be unique")
        if not self.all_groups:
            raise ConfigError("grid needs at least one group")

    @property
    def all_groups(self) -> tuple[GroupSpec, ...]:
        return self.groups + ((self.reserve,) if self.reserve is not None else ())

    @property
    def m(self) -> int:
        return self.values_per_group

    @property
    def g(self) -> int:
        return len(self.all_groups)

    @property
    def n_actions(self) -> int:
        return self.m ** self.g

    def group_values(self, j: int) -> np.ndarray:
        spec = self.all_groups[j]
        m = self.m
        step = (spec.max - spec.min) / (m - 1)
        vals = spec.min + np.arange(m, dtype=np.float64) * step
        vals[0] = spec.min
        vals[-1] = spec.max
        return vals

    def group_index(self, name: str) -> int:
        for j, spec in enumerate(self.all_groups):
            if spec.name == name:
                return j
        raise KeyError(name)

    def encode(self, group_indices: Sequence[int]) -> Action:
        idx = tuple(int(i) for i in group_indices)
        if len(idx) != self.g:
            raise InvalidActionError(f"expected {self.g} group indices, got {len(idx)}")
        flat = 0
        for i in idx:
            if not 0 <= i < self.m:
                raise InvalidActionError(f"group index {i} outside [0, {self.m})")
            flat = flat * self.m + i
        return Action(idx, flat)

    def action(self, flat_index: int) -> Action:
        flat = int(flat_index)
        if not 0 <= flat < self.n_actions:
            raise InvalidActionError(f"flat index {flat} outside [0, {self.n_actions})")
        idx = []
        rest = flat
        for _ in range(self.g):
            idx.append(rest % self.m)
            rest //= self.m
        return Action(tuple(reversed(idx)), flat)

    def midpoint_action(self) -> Action:
        return self.encode([(self.m - 1) // 2] * self.g)

    def decode_arrays(self, flat_indices) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Vectorized decode: per-weight value arrays and the reserve array."""
        flat = np.asarray(flat_indices, dtype=np.int64)
        if flat.size and (flat.min() < 0 or flat.max() >= self.n_actions):
            raise InvalidActionError("flat index out of range")
        weights = {name: np.zeros(flat.shape) for name in WEIGHT_CHANNELS}
        reserve = np.zeros(flat.shape)
        for j, spec in enumerate(self.all_groups):
            k = (flat // self.m ** (self.g - 1 - j)) % self.m
            v = self.group_values(j)[k]
            if spec is self.reserve:
                reserve = v
            else:
                for w in spec.member_weights:
                    weights[w] = v
        return weights, reserve

    def to_dict(self) -> dict:
        def spec(s: GroupSpec) -> dict:
            return {"name": s.name, "member_weights": list(s.member_weights), "min": s.min, "max": s.max}

        return {
            "values_per_group": self.m,
            "groups": [spec(s) for s in self.groups],
            "reserve": spec(self.reserve) if self.reserve is not None else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ActionGrid":
        def spec(s: Mapping) -> GroupSpec:
            return GroupSpec(s["name"], tuple(s.get("member_weights", ())), float(s["min"]), float(s["max"]))

        reserve = d.get("reserve")
        return cls(
            groups=tuple(spec(s) for s in d["groups"]),
            values_per_group=int(d["values_per_group"]),
            reserve=spec(reserve) if reserve is not None else None,
        )


def default_grid(m: int = 10, weight_range=(0.0, 2.0), reserve_range=(0.0, 1.0)) -> ActionGrid:
    return ActionGrid(
        groups=(
            GroupSpec("click", ("w_click", "w_click30"), *weight_range),
            GroupSpec("conversion", ("w_conversion",), *weight_range),
        ),
        values_per_group=m,
        reserve=GroupSpec("reserve", (), *reserve_range),
    )


def decode_action(grid: ActionGrid, a: Action) -> UtilityParams:
    if len(a.group_indices) != grid.g or grid.encode(a.group_indices).flat_index != a.flat_index:
        raise InvalidActionError(f"action {a} is not valid for this grid")
    weights = {name: 0.0 for name in WEIGHT_CHANNELS}
    reserve = 0.0
    for j, (spec, k) in enumerate(zip(grid.all_groups, a.group_indices)):
        value = float(grid.group_values(j)[k])
        if spec is grid.reserve:
            reserve = value
        else:
            for w in spec.member_weights:
                weights[w] = value
    return UtilityParams(reserve, weights)


# --- utility and ranking -------------------------------------------------


def estimated_revenue(ad: AdCandidate) -> float:
    if ad.campaign is CampaignType.CLICK_THROUGH:
        return ad.p_click * ad.bid
    if ad.campaign is CampaignType.CONVERSION:
        return ad.p_conversion * ad.bid
    return ad.bid


def estimated_user_value(ad: AdCandidate, coeffs: Sequence[float]) -> float:
    alpha, beta, gamma = coeffs
    return alpha * ad.p_click + beta * ad.p_click30 + gamma * ad.p_conversion


def utility(ad: AdCandidate, params: UtilityParams) -> float:
    rev = estimated_revenue(ad)
    if rev < params.reserve_price:
        return 0.0
    engagement = sum(ad.prob(ch) * params.weight(w) for w, ch in WEIGHT_CHANNELS.items())
    return rev + engagement


def rank(candidates: Sequence[AdCandidate], params: UtilityParams) -> AdCandidate | None:
    """Winner by maximal utility among ads clearing the reserve; first wins ties."""
    best = None
    best_u = -np.inf
    for ad in candidates:
        if estimated_revenue(ad) < params.reserve_price:
            continue
        u = utility(ad, params)
        if u > best_u:
            best, best_u = ad, u
    return best


# --- reward family -------------------------------------------------------

VARIANTS = ("R0", "R1", "R2", "R3", "R4")
R0_COEFFS = {
    CampaignType.CLICK_THROUGH: (1.0, 0.5, 0.0),
    CampaignType.CONVERSION: (0.1, 0.4, 0.5),
    CampaignType.IMPRESSION: (0.0, 0.0, 0.0),
}
R2_SHARED = (1.0, 0.5)
DEFAULT_IMPRESSION_SCALE = 10.0


@dataclass(frozen=True)
class RewardConfig:
    variant: str = "R0"
    per_campaign_coeffs: Mapping[CampaignType, tuple[float, float, float]] = field(
        default_factory=lambda: dict(R0_COEFFS)
    )
    impression_revenue_scale: float = DEFAULT_IMPRESSION_SCALE
    normalization: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown reward variant {self.variant!r}")
        coeffs = {c: tuple(float(x) for x in self.per_campaign_coeffs.get(c, (0.0, 0.0, 0.0))) for c in CampaignType}
        for c, v in coeffs.items():
            if len(v) != 3 or min(v) < 0:
                raise ConfigError(f"coefficients for {c.value} must be three non-negative numbers")
        if self.variant == "R1":
            coeffs = {c: (0.0, 0.0, 0.0) for c in CampaignType}
        if self.variant in ("R3", "R4"):
            coeffs[CampaignType.IMPRESSION] = (0.0, 0.0, 0.0)
        if self.variant == "R4":
            coeffs[CampaignType.CONVERSION] = (0.0, 0.0, coeffs[CampaignType.CONVERSION][2])
        if self.impression_revenue_scale < 0:
            raise ConfigError("impression_revenue_scale must be >= 0")
        object.__setattr__(self, "per_campaign_coeffs", coeffs)

    @classmethod
    def preset(cls, variant: str, **overrides) -> "RewardConfig":
        if variant == "R2":
            a, b = overrides.pop("shared", R2_SHARED)
            coeffs = {c: (a, b, 0.0) for c in CampaignType}
        else:
            coeffs = dict(R0_COEFFS)
        coeffs.update(overrides.pop("per_campaign_coeffs", {}))
        return cls(variant=variant, per_campaign_coeffs=coeffs, **overrides)

    def coeff_matrix(self) -> np.ndarray:
        """(3 campaign codes, 3 channels) coefficient table."""
        return np.array([self.per_campaign_coeffs[c] for c in _CAMPAIGNS], dtype=np.float64)

    def revenue_scale_vector(self) -> np.ndarray:
        scale = np.ones(3)
        if self.variant in ("R3", "R4"):
            scale[CampaignType.IMPRESSION.code] = self.impression_revenue_scale
        return scale

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "per_campaign_coeffs": {c.value: list(v) for c, v in self.per_campaign_coeffs.items()},
            "impression_revenue_scale": self.impression_revenue_scale,
            "normalization": self.normalization,
        }


@dataclass(frozen=True)
class Reward:
    value: float
    estimated_revenue: float
    estimated_user_value: float


def compute_reward(
    winner: AdCandidate,
    config: RewardConfig,
    normalized_probs: Mapping[str, float] | None = None,
) -> Reward:
    if config.normalization and normalized_probs is None:
        raise ConfigError("reward normalization is on but no batch-normalized probabilities were supplied")
    probs = normalized_probs if config.normalization else {ch: winner.prob(ch) for ch in CHANNELS}
    coeffs = config.per_campaign_coeffs[winner.campaign]
    revenue = estimated_revenue(winner) * config.revenue_scale_vector()[winner.campaign.code]
    user_value = sum(c * probs[ch] for c, ch in zip(coeffs, CHANNELS))
    return Reward(revenue + user_value, revenue, user_value)


def normalize_batch(values: Sequence[float]) -> list[float]:
    """Min-max scaling done in decimal on each value's shortest repr.

    [0.1, 0.3, 0.5] gives [0, 0.5, 1] exactly, which binary subtraction
    cannot. Training uses the vectorized ``normalize_array`` instead.
    """
    dec = [Decimal(repr(float(v))) for v in values]
    if not dec:
        return []
    lo, hi = min(dec), max(dec)
    if hi == lo:
        return [0.0] * len(dec)
    return [float((d - lo) / (hi - lo)) for d in dec]


def normalize_array(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return values.copy()
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


# --- batch versions ------------------------------------------------------


@dataclass
class AdBatch:
    """Candidate ads of many requests as (n_requests, n_candidates) arrays."""

    campaign: np.ndarray
    p_click: np.ndarray
    p_click30: np.ndarray
    p_conversion: np.ndarray
    bid: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.campaign.shape

    def prob(self, channel: str) -> np.ndarray:
        return getattr(self, channel)

    @classmethod
    def from_candidates(cls, requests: Sequence[Sequence[AdCandidate]]) -> "AdBatch":
        k = max((len(r) for r in requests), default=0)
        n = len(requests)
        out = cls(
            campaign=np.zeros((n, k), dtype=np.int64),
            p_click=np.zeros((n, k)),
            p_click30=np.zeros((n, k)),
            p_conversion=np.zeros((n, k)),
            bid=np.full((n, k), -1.0),
        )
        for i, ads in enumerate(requests):
            for j, ad in enumerate(ads):
                out.campaign[i, j] = ad.campaign.code
                out.p_click[i, j] = ad.p_click
                out.p_click30[i, j] = ad.p_click30
                out.p_conversion[i, j] = ad.p_conversion
                out.bid[i, j] = ad.bid
        return out

    def estimated_revenue(self) -> np.ndarray:
        rev = np.where(
            self.campaign == CampaignType.CLICK_THROUGH.code,
            self.p_click * self.bid,
            np.where(self.campaign == CampaignType.CONVERSION.code, self.p_conversion * self.bid, self.bid),
        )
        # padded slots (bid < 0) can never clear a reserve
        return np.where(self.bid < 0, -np.inf, rev)

    def engagement(self, weights: Mapping[str, np.ndarray | float]) -> np.ndarray:
        total = np.zeros(self.shape)
        for w, ch in WEIGHT_CHANNELS.items():
            wv = np.asarray(weights.get(w, 0.0), dtype=np.float64)
            if wv.ndim == 1:
                wv = wv[:, None]
            total = total + self.prob(ch) * wv
        return total


def winners_batch(ads: AdBatch, weights: Mapping[str, np.ndarray | float], reserve) -> np.ndarray:
    """Winning candidate position per request, or -1 when every ad is gated."""
    rev = ads.estimated_revenue()
    reserve = np.asarray(reserve, dtype=np.float64)
    if reserve.ndim == 1:
        reserve = reserve[:, None]
    passes = rev >= reserve
    u = np.where(passes, rev + ads.engagement(weights), -np.inf)
    idx = np.argmax(u, axis=1)
    ok = passes[np.arange(len(idx)), idx]
    return np.where(ok, idx, -1)


def reward_matrix(ads: AdBatch, config: RewardConfig, normalized: Mapping[str, np.ndarray] | None = None):
    """Per-candidate (revenue, user value) under ``config`` using raw probabilities unless given."""
    coeffs = config.coeff_matrix()[ads.campaign]
    rev = ads.estimated_revenue()
    rev = np.where(np.isfinite(rev), rev, 0.0) * config.revenue_scale_vector()[ads.campaign]
    probs = normalized if normalized is not None else {ch: ads.prob(ch) for ch in CHANNELS}
    uv = sum(coeffs[..., i] * probs[ch] for i, ch in enumerate(CHANNELS))
    return rev, uv
