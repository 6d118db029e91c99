"""Softmax policy over the flat action grid, with hand-written backprop.

Architecture: one embedding table per categorical feature, concatenated with
the numerical and dense features, then ``len(hidden)`` blocks of
batch-norm -> linear -> ReLU, then a linear output layer and a softmax.
Parameters are stored as float32; all arithmetic runs in float64.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .core import Action, ActionGrid
from .errors import CheckpointError, ContractError, IOFailure, NumericError, SchemaError
from .simenv import FeatureSchema, RequestState

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
EVAL_CHUNK = 4096

MAGIC = b"DPUT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    embed_dim: int = 8
    hidden: tuple[int, ...] = (64, 32)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.embed_dim < 1 or any(h < 1 for h in self.hidden):
            raise ContractError("embed_dim and hidden widths must be >= 1")


@dataclass
class PolicyInputs:
    cat: np.ndarray
    num: np.ndarray
    dense: np.ndarray

    def __len__(self) -> int:
        return len(self.cat)

    def take(self, idx) -> "PolicyInputs":
        return PolicyInputs(self.cat[idx], self.num[idx], self.dense[idx])

    @classmethod
    def from_states(cls, states: Sequence[RequestState]) -> "PolicyInputs":
        cat = np.array([s.categorical for s in states], dtype=np.int64).reshape(len(states), -1)
        num = np.array([s.numerical for s in states], dtype=np.float64).reshape(len(states), -1)
        dense = np.array([[x for v in s.dense for x in v] for s in states], dtype=np.float64).reshape(len(states), -1)
        return cls(cat, num, dense)

    @classmethod
    def from_log(cls, data) -> "PolicyInputs":
        return cls(data.cat, data.num, data.dense)


@dataclass
class _Cache:
    n: int
    x: np.ndarray
    blocks: list = field(default_factory=list)  # per block: (xhat, std, y, z)
    h: np.ndarray | None = None
    probs: np.ndarray | None = None
    cat: np.ndarray | None = None


class PolicyNet:
    """Parameters live in ``params`` (learnable) and ``buffers`` (running statistics)."""

    def __init__(self, schema: FeatureSchema, grid: ActionGrid, arch: ArchConfig, params: dict, buffers: dict):
        self.schema = schema
        self.grid = grid
        self.arch = arch
        self.params = params
        self.buffers = buffers
        self._cache: _Cache | None = None

    # -- structure ------------------------------------------------------

    @property
    def n_actions(self) -> int:
        return self.grid.n_actions

    @property
    def input_width(self) -> int:
        return (
            len(self.schema.categorical_specs) * self.arch.embed_dim
            + len(self.schema.numerical_names)
            + self.schema.dense_width
        )

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def layer_names(self) -> list[str]:
        return list(self.params) + list(self.buffers)

    def astype(self, dtype) -> "PolicyNet":
        return PolicyNet(
            self.schema, self.grid, self.arch,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def copy(self) -> "PolicyNet":
        return self.astype(self.dtype)

    # -- forward --------------------------------------------------------

    def _inputs(self, inputs: PolicyInputs) -> np.ndarray:
        cat = np.asarray(inputs.cat, dtype=np.int64)
        cards = self.schema.cardinalities
        if cat.shape[1:] != (len(cards),):
            raise SchemaError(f"expected {len(cards)} categorical features, got shape {cat.shape}")
        if cat.size and (cat.min() < 0 or np.any(cat >= np.array(cards))):
            raise SchemaError("categorical id outside declared cardinality")
        parts = [self.params[f"emb{i}"].astype(np.float64)[cat[:, i]] for i in range(len(cards))]
        parts += [np.asarray(inputs.num, dtype=np.float64), np.asarray(inputs.dense, dtype=np.float64)]
        x = np.concatenate(parts, axis=1)
        if x.shape[1] != self.input_width:
            raise SchemaError(f"input width {x.shape[1]} does not match network width {self.input_width}")
        return x

    def logits(self, inputs: PolicyInputs, mode: str = "eval", update_running: bool = True) -> np.ndarray:
        if mode not in ("train", "eval"):
            raise ContractError(f"unknown mode {mode!r}")
        n = len(inputs)
        if n < 1:
            raise ContractError("batch must contain at least one state")
        if mode == "train" and n < 2:
            raise ContractError("train-mode forward needs a batch of at least 2 (batch-norm statistics)")
        if mode == "eval" and n > EVAL_CHUNK:
            return np.concatenate(
                [self.logits(inputs.take(slice(s, s + EVAL_CHUNK)), "eval") for s in range(0, n, EVAL_CHUNK)]
            )
        x = self._inputs(inputs)
        cache = _Cache(n=n, x=x, cat=np.asarray(inputs.cat))
        h = x
        for l in range(len(self.arch.hidden)):
            gamma = self.params[f"bn{l}.gamma"].astype(np.float64)
            beta = self.params[f"bn{l}.beta"].astype(np.float64)
            if mode == "train":
                mu = h.mean(axis=0)
                var = h.var(axis=0)
                if update_running:
                    unbiased = var * n / (n - 1)
                    rm, rv = self.buffers[f"bn{l}.running_mean"], self.buffers[f"bn{l}.running_var"]
                    rm[...] = BN_MOMENTUM * rm.astype(np.float64) + (1 - BN_MOMENTUM) * mu
                    rv[...] = BN_MOMENTUM * rv.astype(np.float64) + (1 - BN_MOMENTUM) * unbiased
            else:
                mu = self.buffers[f"bn{l}.running_mean"].astype(np.float64)
                var = self.buffers[f"bn{l}.running_var"].astype(np.float64)
            std = np.sqrt(var + BN_EPS)
            xhat = (h - mu) / std
            y = gamma * xhat + beta
            z = y @ self.params[f"fc{l}.W"].astype(np.float64) + self.params[f"fc{l}.b"].astype(np.float64)
            cache.blocks.append((xhat, std, y, z))
            h = np.maximum(z, 0.0)
        cache.h = h
        out = h @ self.params["out.W"].astype(np.float64) + self.params["out.b"].astype(np.float64)
        if mode == "train":
            self._cache = cache
        return out

    def forward(self, inputs: PolicyInputs, mode: str = "eval", update_running: bool = True) -> np.ndarray:
        z = self.logits(inputs, mode, update_running)
        p = np.exp(log_softmax(z))
        if mode == "train":
            self._cache.probs = p
        return p

    def log_probs(self, inputs: PolicyInputs, actions, mode: str = "eval") -> np.ndarray:
        z = self.logits(inputs, mode)
        return log_softmax(z)[np.arange(len(z)), np.asarray(actions, dtype=np.int64)]

    def recalibrate(self, inputs: PolicyInputs, batch_size: int = 64) -> None:
        """Refresh batch-norm running statistics with train-mode passes; parameters stay untouched.

        A fresh network's running stats are (0, 1), so eval mode on raw
        features can be far from what training batches see.
        """
        if batch_size < 2:
            raise ContractError("batch_size must be >= 2")
        n = len(inputs)
        for start in range(0, n, batch_size):
            if n - start >= 2:
                self.logits(inputs.take(slice(start, start + batch_size)), "train")
        self._cache = None

    def greedy(self, inputs: PolicyInputs) -> np.ndarray:
        """Greedy flat actions in eval mode; first maximum wins ties."""
        return np.argmax(self.logits(inputs, "eval"), axis=1)

    # -- backward -------------------------------------------------------

    def backward(self, inputs: PolicyInputs, actions, weights) -> dict[str, np.ndarray]:
        """Gradient of ``-(1/B) sum_i w_i log pi(a_i | s_i)`` after a train-mode forward on the same batch."""
        c = self._cache
        actions = np.asarray(actions, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        if c is None or c.probs is None:
            raise ContractError("backward needs a preceding train-mode forward")
        if len(inputs) != c.n or len(actions) != c.n or len(weights) != c.n or not np.array_equal(inputs.cat, c.cat):
            raise ContractError("backward batch does not match the preceding train-mode forward")
        if actions.min() < 0 or actions.max() >= self.n_actions:
            raise ContractError("action index outside the grid")
        n = c.n
        g = c.probs.copy()
        g[np.arange(n), actions] -= 1.0
        g *= (weights / n)[:, None]

        grads: dict[str, np.ndarray] = {}
        grads["out.W"] = c.h.T @ g
        grads["out.b"] = g.sum(axis=0)
        dh = g @ self.params["out.W"].astype(np.float64).T
        for l in reversed(range(len(self.arch.hidden))):
            xhat, std, y, z = c.blocks[l]
            dz = dh * (z > 0)
            grads[f"fc{l}.W"] = y.T @ dz
            grads[f"fc{l}.b"] = dz.sum(axis=0)
            dy = dz @ self.params[f"fc{l}.W"].astype(np.float64).T
            gamma = self.params[f"bn{l}.gamma"].astype(np.float64)
            grads[f"bn{l}.gamma"] = (dy * xhat).sum(axis=0)
            grads[f"bn{l}.beta"] = dy.sum(axis=0)
            dxhat = dy * gamma
            dh = (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)) / std
        e = self.arch.embed_dim
        for i, card in enumerate(self.schema.cardinalities):
            gi = np.zeros((card, e))
            np.add.at(gi, c.cat[:, i], dh[:, i * e : (i + 1) * e])
            grads[f"emb{i}"] = gi
        return {k: grads[k] for k in self.params}

    def apply_update(self, grads: dict[str, np.ndarray], step_size: float) -> None:
        for k, g in grads.items():
            p = self.params[k]
            p[...] = (p.astype(np.float64) - step_size * g).astype(p.dtype)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def init(schema: FeatureSchema, grid: ActionGrid, arch: ArchConfig | None = None, seed: int = 0) -> PolicyNet:
    arch = arch or ArchConfig()
    g = rngmod.stream(seed, 0, "init")
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    def uniform(fan_in: int, shape) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return g.uniform(-bound, bound, size=shape).astype(np.float32)

    for i, card in enumerate(schema.cardinalities):
        params[f"emb{i}"] = uniform(card, (card, arch.embed_dim))
    width = len(schema.categorical_specs) * arch.embed_dim + len(schema.numerical_names) + schema.dense_width
    for l, h in enumerate(arch.hidden):
        params[f"bn{l}.gamma"] = np.ones(width, np.float32)
        params[f"bn{l}.beta"] = np.zeros(width, np.float32)
        params[f"fc{l}.W"] = uniform(width, (width, h))
        params[f"fc{l}.b"] = np.zeros(h, np.float32)
        buffers[f"bn{l}.running_mean"] = np.zeros(width, np.float32)
        buffers[f"bn{l}.running_var"] = np.ones(width, np.float32)
        width = h
    params["out.W"] = uniform(width, (width, grid.n_actions))
    params["out.b"] = np.zeros(grid.n_actions, np.float32)
    return PolicyNet(schema, grid, arch, params, buffers)


def forward(net: PolicyNet, states, mode: str = "eval") -> np.ndarray:
    inputs = states if isinstance(states, PolicyInputs) else PolicyInputs.from_states(states)
    return net.forward(inputs, mode)


def log_prob(net: PolicyNet, state: RequestState, action: Action | int) -> float:
    a = action.flat_index if isinstance(action, Action) else int(action)
    return float(net.log_probs(PolicyInputs.from_states([state]), [a])[0])


def select_action(dist, mode: str, rng_stream: np.random.Generator | None, grid: ActionGrid) -> Action:
    p = np.asarray(dist, dtype=np.float64)
    if mode == "greedy":
        return grid.action(int(np.argmax(p)))
    if mode != "sample":
        raise ContractError(f"unknown selection mode {mode!r}")
    cdf = np.cumsum(p)
    u = rng_stream.random() * cdf[-1]
    return grid.action(int(min(np.searchsorted(cdf, u, side="right"), len(p) - 1)))


def backward(net: PolicyNet, inputs: PolicyInputs, actions, weights) -> dict[str, np.ndarray]:
    return net.backward(inputs, actions, weights)


def loss(net: PolicyNet, inputs: PolicyInputs, actions, weights) -> float:
    """Train-mode loss without touching running statistics (used for gradient checks)."""
    z = net.logits(inputs, "train", update_running=False)
    lp = log_softmax(z)[np.arange(len(inputs)), np.asarray(actions, dtype=np.int64)]
    return float(-(np.asarray(weights, dtype=np.float64) * lp).mean())


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


# --- checkpoint ----------------------------------------------------------


def _checkpoint_bytes(net: PolicyNet, metadata: dict | None) -> bytes:
    arrays = {**net.params, **net.buffers}
    manifest, offset = [], 0
    for name, arr in arrays.items():
        nbytes = arr.size * 4
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "schema": net.schema.to_dict(),
        "schema_hash": net.schema.hash(),
        "grid": net.grid.to_dict(),
        "arch": {"embed_dim": net.arch.embed_dim, "hidden": list(net.arch.hidden)},
        "manifest": manifest,
        "total_bytes": offset,
        "metadata": metadata or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(arrays[m["name"]], dtype="<f4").tobytes() for m in manifest)
    return MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + struct.pack("<I", len(head)) + head + blob


def save(net: PolicyNet, path, metadata: dict | None = None) -> None:
    data = _checkpoint_bytes(net, metadata)
    with open(path, "wb") as fh:
        fh.write(data)


@dataclass
class Checkpoint:
    net: PolicyNet
    metadata: dict
    format_version: int


def load_checkpoint(path, schema: FeatureSchema | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format_version {version}")
    (hlen,) = struct.unpack("<I", data[8:12])
    if 12 + hlen > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
        file_schema = FeatureSchema.from_dict(header["schema"])
        grid = ActionGrid.from_dict(header["grid"])
        arch = ArchConfig(int(header["arch"]["embed_dim"]), tuple(header["arch"]["hidden"]))
        manifest = header["manifest"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    if file_schema.hash() != header.get("schema_hash"):
        raise CheckpointError(f"{path}: schema_hash in header does not match its schema")
    if schema is not None and header["schema_hash"] != schema.hash():
        raise CheckpointError(
            f"{path}: schema_hash {header['schema_hash']} does not match expected {schema.hash()}"
        )
    blob = data[12 + hlen :]
    template = init(file_schema, grid, arch, seed=0)
    expected = {**template.params, **template.buffers}
    arrays: dict[str, np.ndarray] = {}
    for m in manifest:
        name, shape, off, nbytes = m["name"], tuple(m["shape"]), int(m["offset"]), int(m["nbytes"])
        if name not in expected or expected[name].shape != shape:
            raise CheckpointError(f"{path}: layer {name!r} has unexpected shape {shape}")
        if off + nbytes > len(blob):
            raise CheckpointError(f"{path}: blob truncated inside layer {name!r}")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=off).astype(np.float32).reshape(shape)
    missing = set(expected) - set(arrays)
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks layers {sorted(missing)}")
    if len(blob) != header.get("total_bytes"):
        raise CheckpointError(f"{path}: blob length {len(blob)} differs from manifest total {header.get('total_bytes')}")
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{path}: non-finite values in layer {name!r}")
    net = PolicyNet(
        file_schema, grid, arch,
        {k: arrays[k] for k in template.params},
        {k: arrays[k] for k in template.buffers},
    )
    return Checkpoint(net, header.get("metadata", {}), version)


def load(path, schema: FeatureSchema | None = None) -> PolicyNet:
    return load_checkpoint(path, schema).net
