"""Run configuration: YAML file, pydantic validation, presets and runtime objects."""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .core import ActionGrid, CampaignType, GroupSpec, RewardConfig
from .errors import ConfigError, IOFailure, UtilTuneError
from .policy import ArchConfig
from .simenv import BehaviorPolicy, SimConfig, UserSegment, desk_segments
from .train import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SegmentModel(_Strict):
    ctr: float = Field(ge=0, le=1)
    ctr30: float = Field(ge=0, le=1)
    cvr: float = Field(ge=0, le=1)
    cpm: float = Field(gt=0)
    weight: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def _ctr30(self):
        if self.ctr30 > self.ctr:
            raise ValueError("ctr30 must not exceed ctr")
        return self


class CampaignFloats(_Strict):
    clickthrough: float = Field(ge=0)
    conversion: float = Field(ge=0)
    impression: float = Field(ge=0)


class BidRanges(_Strict):
    clickthrough: tuple[float, float]
    conversion: tuple[float, float]
    impression: tuple[float, float]


class SimModel(_Strict):
    segments: list[SegmentModel] = Field(min_length=1)
    candidates_per_request: int = Field(default=20, ge=1)
    noise_sigma: float = Field(default=0.1, ge=0)
    campaign_mix: CampaignFloats = CampaignFloats(clickthrough=0.35, conversion=0.36, impression=0.29)
    bid_distributions: BidRanges = BidRanges(clickthrough=(0.5, 2.0), conversion=(2.0, 12.0), impression=(0.01, 0.2))
    exploration_fraction: float = Field(default=0.5, gt=0, le=100)
    exploration_cap: float = Field(default=0.5, gt=0, le=100)
    affinity_sigma: float = Field(default=0.6, ge=0)
    impression_ctr: float = Field(default=0.45, ge=0, le=1)
    impression_ctr_half: float = Field(default=0.01, ge=0)
    conversion_click_affinity: float = Field(default=0.6, ge=0)
    bid_affinity_exponent: float = 1.28
    hint_accuracy: float = Field(default=1.0, ge=0, le=1)
    observation_sigma: float = Field(default=0.88, ge=0)
    dense_dim: int = Field(default=4, ge=1)
    dense_sigma: float = Field(default=0.3, ge=0)


class GroupModel(_Strict):
    name: str
    member_weights: list[Literal["w_click", "w_click30", "w_conversion"]]
    min: float = Field(ge=0)
    max: float


class RangeModel(_Strict):
    min: float = Field(ge=0)
    max: float


class GridModel(_Strict):
    values_per_group: int = Field(default=10, ge=2)
    groups: list[GroupModel]
    reserve: Optional[RangeModel]


class CoeffModel(_Strict):
    clickthrough: tuple[float, float, float]
    conversion: tuple[float, float, float]
    impression: tuple[float, float, float]


class RewardModel(_Strict):
    variant: Literal["R0", "R1", "R2", "R3", "R4"] = "R0"
    coefficients: Optional[CoeffModel] = None
    r2_shared: tuple[float, float] = (1.0, 0.5)
    impression_revenue_scale: float = Field(default=10.0, ge=0)
    normalization: bool = False


class ArchModel(_Strict):
    embed_dim: int = Field(default=8, ge=1)
    hidden: list[int] = [64, 32]


class TrainModel(_Strict):
    step_size: float = Field(default=1.0, gt=0)
    batch_size: int = Field(default=64, ge=2)
    epochs: int = Field(default=5, ge=1)
    shuffle: bool = True


class BehaviorModel(_Strict):
    sigma: Optional[float] = Field(default=None, gt=0)


class EvalModel(_Strict):
    diversity_threshold: float = Field(default=0.1, ge=0, le=1)
    n_buckets: int = Field(default=4, ge=2)
    n_requests: int = Field(default=10_000, ge=1)
    n_oracle: int = Field(default=2_000, ge=1)
    bucket_population: int = Field(default=10_000, ge=2)


class PathsModel(_Strict):
    out_dir: str = "runs"


class RunConfig(_Strict):
    seed: int = 0
    sim: SimModel
    grid: GridModel
    reward: RewardModel = RewardModel()
    train: TrainModel = TrainModel()
    arch: ArchModel = ArchModel()
    behavior: BehaviorModel = BehaviorModel()
    eval: EvalModel = EvalModel()
    paths: PathsModel = PathsModel()

    # -- runtime objects ------------------------------------------------

    def sim_config(self, seed: int | None = None) -> SimConfig:
        s = self.sim
        return SimConfig(
            seed=self.seed if seed is None else seed,
            segments=tuple(UserSegment(i, g.ctr, g.ctr30, g.cvr, g.cpm, g.weight) for i, g in enumerate(s.segments)),
            candidates_per_request=s.candidates_per_request,
            noise_sigma=s.noise_sigma,
            campaign_mix={c: getattr(s.campaign_mix, c.value) for c in CampaignType},
            bid_distributions={c: tuple(getattr(s.bid_distributions, c.value)) for c in CampaignType},
            exploration_fraction=s.exploration_fraction,
            exploration_cap=s.exploration_cap,
            affinity_sigma=s.affinity_sigma,
            impression_ctr=s.impression_ctr,
            impression_ctr_half=s.impression_ctr_half,
            conversion_click_affinity=s.conversion_click_affinity,
            bid_affinity_exponent=s.bid_affinity_exponent,
            hint_accuracy=s.hint_accuracy,
            observation_sigma=s.observation_sigma,
            dense_dim=s.dense_dim,
            dense_sigma=s.dense_sigma,
        )

    def action_grid(self) -> ActionGrid:
        g = self.grid
        return ActionGrid(
            groups=tuple(GroupSpec(x.name, tuple(x.member_weights), x.min, x.max) for x in g.groups),
            values_per_group=g.values_per_group,
            reserve=GroupSpec("reserve", (), g.reserve.min, g.reserve.max) if g.reserve else None,
        )

    def reward_config(self, variant: str | None = None) -> RewardConfig:
        r = self.reward
        overrides = {"impression_revenue_scale": r.impression_revenue_scale, "normalization": r.normalization}
        if r.coefficients is not None:
            overrides["per_campaign_coeffs"] = {c: tuple(getattr(r.coefficients, c.value)) for c in CampaignType}
        v = variant or r.variant
        if v == "R2":
            overrides["shared"] = tuple(r.r2_shared)
            overrides.pop("per_campaign_coeffs", None)
        return RewardConfig.preset(v, **overrides)

    def train_config(self, variant: str | None = None, seed: int | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            step_size=t.step_size, batch_size=t.batch_size, epochs=t.epochs,
            seed=self.seed if seed is None else seed, reward_config=self.reward_config(variant),
            shuffle=t.shuffle, arch=ArchConfig(self.arch.embed_dim, tuple(self.arch.hidden)),
        )

    def behavior_policy(self, kind: str) -> BehaviorPolicy:
        if kind == "uniform":
            return BehaviorPolicy.uniform()
        if kind == "gaussian":
            return BehaviorPolicy.gaussian(self.action_grid(), sigma=self.behavior.sigma)
        raise ConfigError(f"unknown behavior policy {kind!r}")

    def build(self) -> "RunConfig":
        """Construct every runtime object once so domain-level errors surface at load time."""
        sim = self.sim_config()
        self.action_grid()
        self.reward_config()
        self.train_config()
        sim.schema()
        return self


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping at the top level")
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None
    try:
        return cfg.build()
    except UtilTuneError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return parse_config(data)


# --- presets -------------------------------------------------------------

DESK_GRID = {
    "values_per_group": 10,
    "groups": [
        {"name": "click", "member_weights": ["w_click", "w_click30"], "min": 0.0, "max": 1.0},
        {"name": "conversion", "member_weights": ["w_conversion"], "min": 0.0, "max": 2.0},
    ],
    "reserve": {"min": 0.0, "max": 0.45},
}

PAPERLIKE_GRID = {
    "values_per_group": 10,
    "groups": [
        {"name": "click", "member_weights": ["w_click", "w_click30"], "min": 0.0, "max": 2.0},
        {"name": "conversion", "member_weights": ["w_conversion"], "min": 0.0, "max": 2.0},
    ],
    "reserve": {"min": 0.0, "max": 1.0},
}


def _segments() -> list[dict]:
    return [{"ctr": s.ctr, "ctr30": s.ctr30, "cvr": s.cvr, "cpm": s.cpm, "weight": s.weight} for s in desk_segments()]


def preset(name: str) -> dict:
    base = RunConfig(sim=SimModel(segments=_segments()), grid=GridModel(**DESK_GRID))
    data = base.model_dump(mode="json")
    if name == "desk":
        data["sim"]["exploration_fraction"] = 100.0
        data["sim"]["exploration_cap"] = 100.0
    elif name == "paperlike":
        data["grid"] = PAPERLIKE_GRID
        data["sim"]["exploration_fraction"] = 0.5
        data["sim"]["exploration_cap"] = 0.5
        data["reward"]["normalization"] = True
    else:
        raise ConfigError(f"unknown preset {name!r} (choose desk or paperlike)")
    return data


COMMENTS = {
    "seed": "single seed for simulation, initialization and shuffling",
    "sim": "synthetic ad-request environment",
    "sim.segments": "latent user segments: ground-truth rates, historical CPM, sampling weight",
    "sim.candidates_per_request": "ads competing in each auction",
    "sim.noise_sigma": "log-normal noise on predicted probabilities",
    "sim.campaign_mix": "probability of each campaign type per candidate",
    "sim.bid_distributions": "uniform bid range per campaign type",
    "sim.exploration_fraction": "percent of traffic reserved for exploration (logged)",
    "sim.exploration_cap": "upper bound on exploration_fraction",
    "sim.affinity_sigma": "log-normal spread of per-ad engagement affinity",
    "sim.impression_ctr": "saturated click rate of impression ads",
    "sim.impression_ctr_half": "segment CTR at which impression clicks reach half saturation",
    "sim.conversion_click_affinity": "click rate of conversion ads relative to the segment CTR",
    "sim.bid_affinity_exponent": "click-through bids scale as affinity ** -exponent",
    "sim.hint_accuracy": "probability the segment_hint feature names the true segment",
    "sim.observation_sigma": "log-normal noise on historical CTR/CVR/CPM features",
    "sim.dense_dim": "width of the dense activity embedding",
    "sim.dense_sigma": "Gaussian noise on the dense activity embedding",
    "grid": "discretized ranking-utility hyperparameters",
    "grid.values_per_group": "m equally spaced values per group, endpoints included",
    "grid.groups": "engagement-weight groups; members share one value",
    "grid.reserve": "reserve price range (encoded as the last group)",
    "reward": "reward family",
    "reward.variant": "R0 default, R1 revenue only, R2 shared coefficients, R3 scaled impressions, R4 CVR-focused",
    "reward.coefficients": "per-campaign <alpha, beta, gamma>; null keeps the defaults",
    "reward.r2_shared": "<alpha, beta> shared across campaigns under R2",
    "reward.impression_revenue_scale": "R3/R4 impression revenue multiplier",
    "reward.normalization": "min-max normalize engagement probabilities per training batch",
    "train": "REINFORCE with discount 0",
    "train.step_size": "SGD step size",
    "train.batch_size": "requests per batch (>= 2 for batch norm)",
    "train.epochs": "passes over the log",
    "train.shuffle": "seeded shuffle each epoch",
    "arch": "policy network",
    "arch.embed_dim": "embedding width per categorical feature",
    "arch.hidden": "hidden widths; each block is batchnorm, linear, ReLU",
    "behavior": "exploration policy settings",
    "behavior.sigma": "gaussian policy std in grid steps; null means (m - 1) / 4",
    "eval": "offline gates and simulator evaluation",
    "eval.diversity_threshold": "minimum Diversity for a pass",
    "eval.n_buckets": "equal-population buckets in reports",
    "eval.n_requests": "fresh simulated requests for policy evaluation",
    "eval.n_oracle": "requests per segment for the brute-force oracle",
    "eval.bucket_population": "simulated requests used for bucket reports",
    "paths": "output locations",
    "paths.out_dir": "directory for reports",
}


def _scalar(v) -> str:
    return yaml.safe_dump(v, default_flow_style=True, width=10**6).strip().removesuffix("\n...").strip()


def render_yaml(data: dict, comments: dict = COMMENTS, prefix: str = "", indent: int = 0) -> str:
    pad = "  " * indent
    out = []
    for key, value in data.items():
        path = f"{prefix}{key}"
        note = comments.get(path)
        if isinstance(value, dict):
            if note:
                out.append(f"{pad}# {note}")
            out.append(f"{pad}{key}:")
            out.append(render_yaml(value, comments, path + ".", indent + 1))
        elif isinstance(value, list) and value and isinstance(value[0], dict):
            if note:
                out.append(f"{pad}# {note}")
            out.append(f"{pad}{key}:")
            for item in value:
                out.append(f"{pad}  - {_scalar(item)}")
        else:
            line = f"{pad}{key}: {_scalar(value)}"
            out.append(f"{line}  # {note}" if note else line)
    return "\n".join(out)


def write_preset(name: str, path) -> str:
    data = preset(name)
    parse_config(data)
    text = f"# utiltune configuration (preset: {name})\n" + render_yaml(data) + "\n"
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return text
