"""Line-delimited JSON log of logged triplets.

The first line is a header ``{"v": 1, "header": {...}}`` carrying the
feature-schema hash and the grid descriptor. Every following line is one
record with the fields ``v, rid, cat, num, dense, a, bp, w, rz`` in that
order. Floats use Python's shortest round-trip repr.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .core import ActionGrid, CampaignType
from .errors import CollectionError, IOFailure, SchemaError
from .simenv import FeatureSchema, LoggedTriplet

FORMAT_VERSION = 1


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def record_line(t: LoggedTriplet) -> str:
    w = None
    if t.winner_raw is not None:
        r = t.winner_raw
        w = {"campaign": r.campaign.value, "p_click": r.p_click, "p_click30": r.p_click30,
             "p_conversion": r.p_conversion, "bid": r.bid}
    z = t.realized
    rec = {
        "v": FORMAT_VERSION,
        "rid": t.request_id,
        "cat": list(t.state.categorical),
        "num": list(t.state.numerical),
        "dense": [list(v) for v in t.state.dense],
        "a": t.action_flat_index,
        "bp": t.behavior_prob,
        "w": w,
        "rz": {"clicked": z.clicked, "clicked30": z.clicked30, "converted": z.converted, "revenue": z.revenue},
    }
    return _dumps(rec)


def header_line(schema: FeatureSchema, grid: ActionGrid, extra: dict | None = None) -> str:
    head = {"schema_hash": schema.hash(), "schema": schema.to_dict(), "grid": grid.to_dict()}
    head.update(extra or {})
    return _dumps({"v": FORMAT_VERSION, "header": head})


def write_log(path, triplets: Iterable[LoggedTriplet], schema: FeatureSchema, grid: ActionGrid,
              extra: dict | None = None, flush_every: int = 4096) -> int:
    """Write a log; returns the record count. I/O errors report the last flushed request id."""
    last_durable = None
    pending = None
    n = 0
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(header_line(schema, grid, extra) + "\n")
            for t in triplets:
                fh.write(record_line(t) + "\n")
                pending = t.request_id
                n += 1
                if n % flush_every == 0:
                    fh.flush()
                    last_durable = pending
            fh.flush()
            os.fsync(fh.fileno())
    except OSError as exc:
        raise CollectionError(f"writing {path} failed: {exc} (last durable request_id={last_durable})",
                              last_request_id=last_durable) from exc
    return n


@dataclass
class LogData:
    header: dict
    rid: np.ndarray
    cat: np.ndarray
    num: np.ndarray
    dense: np.ndarray
    action: np.ndarray
    bp: np.ndarray
    has_winner: np.ndarray
    campaign: np.ndarray  # campaign code, -1 when gated
    p_click: np.ndarray
    p_click30: np.ndarray
    p_conversion: np.ndarray
    bid: np.ndarray
    clicked: np.ndarray
    clicked30: np.ndarray
    converted: np.ndarray
    revenue: np.ndarray

    def __len__(self) -> int:
        return len(self.rid)

    @property
    def schema_hash(self) -> str:
        return self.header["schema_hash"]

    def subset(self, idx) -> "LogData":
        fields = {k: v[idx] if isinstance(v, np.ndarray) else v for k, v in self.__dict__.items()}
        return LogData(**fields)

    def check_schema(self, schema: FeatureSchema) -> None:
        if self.schema_hash != schema.hash():
            raise SchemaError(f"log schema_hash {self.schema_hash} does not match expected {schema.hash()}")


_CAMPAIGN_BY_TOKEN = {c.value: c.code for c in CampaignType}


def read_log(path, schema: FeatureSchema | None = None, allow_empty: bool = False) -> LogData:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IOFailure(f"cannot read log {path}: {exc}") from exc
    if not lines:
        raise SchemaError(f"log {path} is empty")
    try:
        first = json.loads(lines[0])
        header = first["header"]
        if first.get("v") != FORMAT_VERSION:
            raise SchemaError(f"unsupported log format version {first.get('v')}")
        header["schema_hash"]
    except (ValueError, KeyError, TypeError) as exc:
        raise SchemaError(f"log {path}: missing or malformed header line") from exc
    file_schema = FeatureSchema.from_dict(header["schema"])
    if file_schema.hash() != header["schema_hash"]:
        raise SchemaError(f"log {path}: header schema does not match its schema_hash")
    if schema is not None and header["schema_hash"] != schema.hash():
        raise SchemaError(f"log schema_hash {header['schema_hash']} does not match expected {schema.hash()}")

    n_cat = len(file_schema.categorical_specs)
    n_num = len(file_schema.numerical_names)
    dims = [d.dimension for d in file_schema.dense_specs]
    recs = lines[1:]
    n = len(recs)
    if n == 0 and not allow_empty:
        raise SchemaError(f"log {path} has no records")
    out = dict(
        rid=np.zeros(n, np.int64), cat=np.zeros((n, n_cat), np.int64), num=np.zeros((n, n_num)),
        dense=np.zeros((n, sum(dims))), action=np.zeros(n, np.int64), bp=np.zeros(n),
        has_winner=np.zeros(n, bool), campaign=np.full(n, -1, np.int64), p_click=np.zeros(n),
        p_click30=np.zeros(n), p_conversion=np.zeros(n), bid=np.zeros(n), clicked=np.zeros(n, bool),
        clicked30=np.zeros(n, bool), converted=np.zeros(n, bool), revenue=np.zeros(n),
    )
    cards = np.array(file_schema.cardinalities)
    prev = None
    for i, line in enumerate(recs):
        lineno = i + 2
        try:
            r = json.loads(line)
            if r["v"] != FORMAT_VERSION:
                raise SchemaError(f"line {lineno}: unsupported record version {r['v']}")
            cat, num, dense = r["cat"], r["num"], r["dense"]
            if len(cat) != n_cat or len(num) != n_num or [len(v) for v in dense] != dims:
                raise SchemaError(f"line {lineno}: feature lengths do not match the schema")
            rid = int(r["rid"])
            if prev is not None and rid <= prev:
                raise SchemaError(f"line {lineno}: request ids must strictly increase")
            prev = rid
            out["rid"][i] = rid
            out["cat"][i] = cat
            out["num"][i] = num
            if dims:
                out["dense"][i] = [x for v in dense for x in v]
            out["action"][i] = r["a"]
            out["bp"][i] = r["bp"]
            w = r["w"]
            if w is not None:
                out["has_winner"][i] = True
                out["campaign"][i] = _CAMPAIGN_BY_TOKEN[w["campaign"]]
                out["p_click"][i] = w["p_click"]
                out["p_click30"][i] = w["p_click30"]
                out["p_conversion"][i] = w["p_conversion"]
                out["bid"][i] = w["bid"]
            z = r["rz"]
            out["clicked"][i] = z["clicked"]
            out["clicked30"][i] = z["clicked30"]
            out["converted"][i] = z["converted"]
            out["revenue"][i] = z["revenue"]
        except SchemaError:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            raise SchemaError(f"log {path} line {lineno}: malformed record ({exc})") from exc
    if n and (np.any(out["cat"] < 0) or np.any(out["cat"] >= cards)):
        raise SchemaError(f"log {path}: categorical id outside declared cardinality")
    if n and not (np.all(out["bp"] > 0) and np.all(out["bp"] <= 1)):
        raise SchemaError(f"log {path}: behavior probabilities must lie in (0, 1]")
    if n and not np.all(np.isfinite(out["num"])):
        raise SchemaError(f"log {path}: non-finite numerical feature")
    grid = ActionGrid.from_dict(header["grid"])
    if n and (out["action"].min() < 0 or out["action"].max() >= grid.n_actions):
        raise SchemaError(f"log {path}: action index outside the grid")
    return LogData(header=header, **out)


def log_grid(data: LogData) -> ActionGrid:
    return ActionGrid.from_dict(data.header["grid"])
