from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from insitu_io import checkpoint as ck
from insitu_io.checkpoint import (AREAS, HEADER, LockedState, StateTree, deserialize_state,
                                  measure_state, read_checkpoint, restore, serialize_state,
                                  write_checkpoint)
from insitu_io.errors import CheckpointError, QuiesceTimeout
from insitu_io.harness import World, run
from insitu_io.messaging import MsgType
from insitu_io.sdc import read_sdc
from insitu_io.writer import TimeSeriesBuffer, accumulate
from runs import params, profile_config, split_run

EMPTY = StateTree("", ck.T_MAP, children=[])
H = measure_state(EMPTY)


def test_format_arithmetic():
    assert H == HEADER.size + 1 + 2 + 4
    assert len(serialize_state(EMPTY)) == H
    one = StateTree.build({"x": 1.5})
    leaf = 1 + 2 + len("x")
    assert measure_state(one) == H + leaf + 8 == len(serialize_state(one))


def test_tree_kinds_round_trip():
    obj = {"i": -3, "f": 0.1, "s": "héllo", "b": b"\x00\xff", "n": None, "t": True,
           "l": [1, [2.5, "x"], {}], "a": np.arange(6, dtype="<i4").reshape(2, 3),
           "u": np.frombuffer(b"abc", dtype="|u1"), "g": np.float32(2.0)}
    blob = serialize_state(StateTree.build(obj), 3)
    back = deserialize_state(blob, 3).to_python()
    assert back["a"].dtype == np.dtype("<i4") and back["a"].tolist() == [[0, 1, 2], [3, 4, 5]]
    assert back["u"].tobytes() == b"abc"
    assert {k: back[k] for k in "ifsbntl"} == {k: obj[k] for k in "ifsbnt"} | {"l": [1, [2.5, "x"], {}]}
    assert back["g"] == 2.0
    with pytest.raises(CheckpointError):
        StateTree.build({"c": 1j})
    with pytest.raises(CheckpointError):
        StateTree.build({"c": np.zeros(2, dtype=np.complex128)})


leaves = st.one_of(
    st.integers(-2**63, 2**63 - 1), st.floats(allow_nan=False), st.text(max_size=8),
    st.binary(max_size=8), st.none(), st.booleans(),
    st.lists(st.floats(allow_nan=False), max_size=5).map(lambda v: np.array(v, dtype="<f8")))
trees = st.recursive(leaves, lambda kids: st.one_of(
    st.lists(kids, max_size=4), st.dictionaries(st.text(max_size=5), kids, max_size=4)),
    max_leaves=30)


@settings(max_examples=300, deadline=None)
@given(trees)
def test_measure_equals_serialize_length(obj):
    tree = StateTree.build({"root": obj})
    blob = serialize_state(tree, 2)
    assert measure_state(tree) == len(blob)
    again = deserialize_state(blob, 2)
    assert serialize_state(again, 2) == blob


def test_deserialize_rejects():
    blob = serialize_state(StateTree.build({"x": [1, 2]}), 1)
    with pytest.raises(CheckpointError, match="magic"):
        deserialize_state(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        deserialize_state(blob[:4] + b"\x09\x00" + blob[6:])
    with pytest.raises(CheckpointError, match="expected area"):
        deserialize_state(blob, 2)
    with pytest.raises(CheckpointError):
        deserialize_state(blob[:-1])
    with pytest.raises(CheckpointError):
        deserialize_state(blob[:8])
    bad = bytearray(blob)
    bad[HEADER.size] = 99
    with pytest.raises(CheckpointError, match="tag"):
        deserialize_state(bytes(bad))


def test_directory_prefix_sums():
    sizes = [10, 0, 20, 5]
    ranks = [[bytes([r]) * n for _ in AREAS] for r, n in enumerate(sizes)]
    f = read_sdc(write_checkpoint(ranks, {"timestep": 4, "model_time": 3.5}))
    d = f.variables["ckpt.directory"].data
    assert d[:, :, 0].tolist() == [[0, 10, 10, 30]] * 5
    assert d[:, :, 1].tolist() == [sizes] * 5
    assert d.dtype == np.dtype("<i8")
    one = read_sdc(write_checkpoint([[b"ab"] * 5], {"timestep": 1, "model_time": 0.0}))
    assert one.variables["ckpt.directory"].data[:, 0].tolist() == [[0, 2]] * 5


def mid_run_world(servers=2, T=40):
    cfg = profile_config(servers, 2)
    w = World(cfg, params(servers, 2, checkpoint_at=T))
    w.run()
    return w


def test_capture_restore_equal_and_single_allocation(monkeypatch):
    w = mid_run_world()
    calls = []

    def counting(n):
        calls.append(n)
        return bytearray(n)

    monkeypatch.setattr(ck, "_alloc", counting)
    blob = ck.capture(w, 40)
    assert len(calls) == len(AREAS) * len(w.servers)
    meta, areas = read_checkpoint(blob, 2)
    assert meta["timestep"] == 40 and meta["server_count"] == 2
    # structural and bitwise equality, compared through the canonical encoding
    for s, got in zip(w.servers, areas):
        for a, (mine, theirs) in enumerate(zip(s.writer.export_state(), got)):
            assert (serialize_state(StateTree.build(theirs, AREAS[a]), a + 1)
                    == serialize_state(StateTree.build(mine, AREAS[a]), a + 1))
    with pytest.raises(CheckpointError, match="servers"):
        read_checkpoint(blob, 3)
    with pytest.raises(CheckpointError, match="rank"):
        restore(blob, 5)


def test_epoch_change_between_phases():
    w = mid_run_world()
    locked = LockedState(w.servers[0].writer)
    locked.measure()
    w.servers[0].writer.epoch += 1
    with pytest.raises(CheckpointError, match="epoch"):
        locked.serialize()
    with pytest.raises(CheckpointError, match="before measure"):
        LockedState(w.servers[1].writer).serialize()


def test_corrupt_checkpoint():
    w = mid_run_world()
    blob = w.checkpoint
    f = read_sdc(blob)
    f.variables["ckpt.directory"].data = f.variables["ckpt.directory"].data.copy()
    f.variables["ckpt.directory"].data[0, 1, 0] += 1
    from insitu_io.sdc import write_sdc
    with pytest.raises(CheckpointError, match="directory"):
        restore(write_sdc(f), 0)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        restore(b"junk", 0)


def test_buffer_mid_window_round_trip():
    buf = TimeSeriesBuffer("averaged", 10.0)
    for i, t in enumerate([1.0, 2.5, 4.0]):
        accumulate(buf, 0.1 * (i + 1), i + 1, t)
    state = {"total": buf.total, "count": buf.count, "window": buf.window}
    back = deserialize_state(serialize_state(StateTree.build(state))).to_python()
    assert back == state and back["total"].hex() == float(buf.total).hex()


def test_quiesce_idle_returns_immediately():
    w = mid_run_world()
    ck.quiesce(w, 40, timeout=0.0, drive=lambda: None)


def test_quiesce_reports_stuck_uid():
    cfg = profile_config(2, 2)
    drop = lambda msg: msg.msg_type == MsgType.ACTIVE
    p = params(2, 2, checkpoint_at=30)
    p = replace(p, transport=replace(p.transport, drop_probability=1.0, drop_filter=drop))
    with pytest.raises(QuiesceTimeout) as info:
        run(cfg, p)
    assert any("VWP_mean" in line for line in info.value.stuck), info.value.stuck


def test_quiesce_timeout():
    cfg = profile_config(2, 2)
    drop = lambda msg: msg.msg_type == MsgType.ACTIVE
    p = params(2, 2, checkpoint_at=30, quiesce_timeout=0.05, end_time=1e9)
    p = replace(p, transport=replace(p.transport, drop_probability=1.0, drop_filter=drop))
    with pytest.raises(QuiesceTimeout, match="timed out"):
        run(cfg, p)


@pytest.mark.parametrize("T", [12, 50, 100, 101, 150])
def test_split_run_matches_straight(T):
    cfg = profile_config(2, 2)
    p = params(2, 2, end_time=220.0, seed=3, model_seed=T)
    straight = run(cfg, p)
    _, second, files = split_run(cfg, p, T, seed2=99)
    assert files == straight.files
    assert second.terminated


def test_restore_with_wrong_server_count():
    cfg = profile_config(2, 2)
    p = params(2, 2, end_time=120.0)
    first = run(cfg, replace(p, checkpoint_at=20))
    from insitu_io.errors import CheckpointError as CE
    with pytest.raises(CE, match="servers"):
        run(profile_config(4, 1), replace(params(4, 1), restore_from=first.checkpoint))
