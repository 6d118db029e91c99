import json

import numpy as np
import pytest

from conftest import small_grid
from utiltune.errors import CollectionError, IOFailure, SchemaError
from utiltune.logfile import header_line, read_log, record_line, write_log
from utiltune.simenv import BehaviorPolicy, collect

FIELDS = ["v", "rid", "cat", "num", "dense", "a", "bp", "w", "rz"]


@pytest.fixture
def log_path(tmp_path, sim):
    grid = small_grid(3)
    p = tmp_path / "log.jsonl"
    write_log(p, collect(sim, grid, BehaviorPolicy.uniform(), 200), sim.schema(), grid)
    return p


def test_record_field_order(log_path):
    lines = log_path.read_text().splitlines()
    head = json.loads(lines[0])
    assert list(head) == ["v", "header"] and head["v"] == 1
    for line in lines[1:]:
        assert list(json.loads(line)) == FIELDS


def test_floats_round_trip(log_path, sim):
    grid = small_grid(3)
    triplets = list(collect(sim, grid, BehaviorPolicy.uniform(), 200))
    data = read_log(log_path, sim.schema())
    for i, t in enumerate(triplets):
        assert data.num[i].tolist() == list(t.state.numerical)
        assert data.bp[i] == t.behavior_prob
        if t.winner_raw is not None:
            assert data.bid[i] == t.winner_raw.bid and data.p_click[i] == t.winner_raw.p_click


def test_byte_identical(tmp_path, sim, log_path):
    grid = small_grid(3)
    other = tmp_path / "again.jsonl"
    write_log(other, collect(sim, grid, BehaviorPolicy.uniform(), 200), sim.schema(), grid)
    assert other.read_bytes() == log_path.read_bytes()


def test_schema_mismatch(log_path, schema):
    with pytest.raises(SchemaError):
        read_log(log_path, schema)


def test_empty_and_header_only(tmp_path, sim):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(SchemaError):
        read_log(empty)
    head = tmp_path / "head.jsonl"
    head.write_text(header_line(sim.schema(), small_grid(3)) + "\n")
    with pytest.raises(SchemaError):
        read_log(head)
    assert len(read_log(head, allow_empty=True)) == 0


def test_missing_file(tmp_path):
    with pytest.raises(IOFailure):
        read_log(tmp_path / "nope.jsonl")


@pytest.mark.parametrize("mutate", [
    lambda r: r.update(cat=r["cat"][:-1]),
    lambda r: r.update(bp=0.0),
    lambda r: r.update(a=10**6),
    lambda r: r.pop("rz"),
    lambda r: r.update(v=7),
    lambda r: r["cat"].__setitem__(0, 99),
])
def test_malformed_record(tmp_path, log_path, mutate):
    lines = log_path.read_text().splitlines()
    rec = json.loads(lines[3])
    mutate(rec)
    lines[3] = json.dumps(rec)
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError):
        read_log(bad)


def test_non_increasing_ids(tmp_path, log_path):
    lines = log_path.read_text().splitlines()
    lines[2], lines[3] = lines[3], lines[2]
    bad = tmp_path / "swap.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError, match="strictly increase"):
        read_log(bad)


def test_write_failure_reports_last_durable_id(tmp_path, sim):
    grid = small_grid(3)

    def broken():
        for i, t in enumerate(collect(sim, grid, BehaviorPolicy.uniform(), 50)):
            if i == 30:
                raise OSError("disk full")
            yield t

    with pytest.raises(CollectionError) as info:
        write_log(tmp_path / "x.jsonl", broken(), sim.schema(), grid, flush_every=10)
    assert info.value.last_request_id == 29
    assert str(info.value).startswith("IO/")


def test_gated_record_has_null_winner(tmp_path, sim):
    from utiltune.core import ActionGrid, GroupSpec
    grid = ActionGrid((GroupSpec("click", ("w_click",), 0, 1),), 2, GroupSpec("reserve", (), 1e5, 1e6))
    p = tmp_path / "gated.jsonl"
    write_log(p, collect(sim, grid, BehaviorPolicy.uniform(), 5), sim.schema(), grid)
    recs = [json.loads(x) for x in p.read_text().splitlines()[1:]]
    assert all(r["w"] is None and r["rz"]["revenue"] == 0.0 for r in recs)
    data = read_log(p)
    assert not data.has_winner.any() and np.all(data.campaign == -1)
