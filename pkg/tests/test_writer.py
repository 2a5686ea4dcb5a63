import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from insitu_io.errors import WriterError
from insitu_io.writer import (CollectiveFileStore, FileSchema, OrderedFieldQueue, ServerClock,
                              TimeSeriesBuffer, accumulate, check_write_trigger,
                              crossed_boundaries, gated_file_op, merge_schemas, output_name,
                              time_dimension, window_index)
from insitu_io.sdc import read_sdc
from netsim import Net
from oracles import windows


# time arithmetic


def test_trigger_examples():
    assert check_write_trigger(98.2, 101.3, 100) == 98.2
    assert check_write_trigger(50, 60, 100) is None
    assert check_write_trigger(95, 215, 100) == 95
    assert crossed_boundaries(95, 215, 100) == [100, 200]
    # a step landing exactly on a boundary stays in that file; the next step triggers
    assert crossed_boundaries(99, 100, 100) == []
    assert crossed_boundaries(100, 100.5, 100) == [100]
    with pytest.raises(WriterError):
        check_write_trigger(5, 5, 10)


def test_window_index_half_open():
    assert [window_index(t, 10) for t in (0.0, 0.1, 10.0, 10.0001, 20.0)] == [0, 0, 0, 1, 1]


@settings(max_examples=300)
@given(st.floats(0, 1e6), st.floats(1e-3, 1e3))
def test_window_index_matches_definition(t, f):
    k = window_index(t, f)
    assert k == windows([t], f)[0]
    assert t <= (k + 1) * f or math.isclose(t, (k + 1) * f)


def test_names():
    assert output_name("profile_ts.nc", 100.0) == "profile_ts_100.nc"
    assert output_name("raw", 2.5) == "raw_2.5"
    assert time_dimension("averaged", 10.0) == "time_averaged_10"
    assert time_dimension("instantaneous", 0.5) == "time_instantaneous_0.5"


# ordered intake


def test_queue_examples():
    q = OrderedFieldQueue("k", 2)
    assert q.intake(4, "b") == []
    assert q.intake(2, "a") == [(2, "a"), (4, "b")]
    assert q.intake(6, "c") == [(6, "c")]
    assert q.released_through == 6
    with pytest.raises(WriterError, match="duplicate"):
        q.intake(4, "x")
    with pytest.raises(WriterError, match="sampling"):
        q.intake(7, "x")
    with pytest.raises(WriterError):
        OrderedFieldQueue("k", 0)


@settings(max_examples=200)
@given(st.permutations([2, 4, 6, 8, 10]))
def test_queue_releases_sorted(perm):
    q = OrderedFieldQueue("k", 2)
    out = [ts for p in perm for ts, _ in q.intake(p, p)]
    assert out == [2, 4, 6, 8, 10] and not q.pending


# time manipulation


def emitted(buf, samples):
    return [e for i, (t, v) in enumerate(samples) for e in accumulate(buf, v, i + 1, t)]


def test_averaged_example():
    out = emitted(TimeSeriesBuffer("averaged", 10.0), [(3, 2.0), (7, 4.0), (12, 9.0)])
    assert [(e.coord, e.value, e.count) for e in out] == [(10.0, 3.0, 2)]


def test_averaged_single_sample_identity():
    out = emitted(TimeSeriesBuffer("averaged", 10.0), [(3, 0.1), (12, 9.0)])
    assert out[0].value == 0.1


def test_instantaneous_example():
    out = emitted(TimeSeriesBuffer("instantaneous", 5.0), [(4.9, 1.0), (5.2, 2.0)])
    assert [(e.coord, e.value, e.rep_time) for e in out] == [(5.0, 2.0, 5.2)]


def test_none_emits_everything():
    out = emitted(TimeSeriesBuffer("none", 1.0), [(0.5, 1.0), (0.7, 2.0)])
    assert [(e.coord, e.value) for e in out] == [(0.5, 1.0), (0.7, 2.0)]


def test_skipped_windows_take_spanning_sample():
    out = emitted(TimeSeriesBuffer("averaged", 10.0), [(5, 1.0), (35, 7.0), (41, 0.0)])
    assert [(e.coord, e.value, e.filled) for e in out] == [
        (10.0, 1.0, False), (20.0, 7.0, True), (30.0, 7.0, True), (40.0, 7.0, False)]
    lead = emitted(TimeSeriesBuffer("averaged", 10.0), [(25, 3.0)])
    assert [(e.coord, e.value, e.filled) for e in lead] == [(10.0, 3.0, True), (20.0, 3.0, True)]


def test_non_monotonic_time():
    buf = TimeSeriesBuffer("averaged", 10.0)
    accumulate(buf, 1.0, 1, 5.0)
    with pytest.raises(WriterError):
        accumulate(buf, 1.0, 2, 5.0)


def trace_strategy():
    return st.lists(st.tuples(st.floats(0.01, 7.0), st.floats(-100, 100)), min_size=1, max_size=60)


def to_samples(steps):
    t, out = 0.0, []
    for dt, v in steps:
        t += dt
        out.append((t, v))
    return out


@settings(max_examples=300, deadline=None)
@given(trace_strategy(), st.sampled_from([1.0, 2.5, 5.0, 10.0]))
def test_averaged_against_oracle(steps, f):
    samples = to_samples(steps)
    out = emitted(TimeSeriesBuffer("averaged", f), samples)
    ks = windows([t for t, _ in samples], f)
    # brute force: group samples by window; closed windows are those below the last one
    expect = {}
    for (t, v), k in zip(samples, ks):
        expect.setdefault(k, []).append(v)
    real = [e for e in out if not e.filled]
    closed = sorted(k for k in expect if k < ks[-1])
    assert [round(e.coord / f) - 1 for e in real] == closed
    for e, k in zip(real, closed):
        total = 0.0
        for v in expect[k]:
            total += v
        assert e.value == total / len(expect[k]) and e.count == len(expect[k])
    # every window below the last sample's window emits exactly once
    assert [e.coord for e in out] == [(j + 1) * f for j in range(ks[-1])]
    # conservation over non-filled emissions
    assert sum(e.count for e in real) == sum(len(expect[k]) for k in closed)


@settings(max_examples=300, deadline=None)
@given(trace_strategy(), st.sampled_from([1.0, 2.5, 5.0]))
def test_instantaneous_against_oracle(steps, f):
    samples = to_samples(steps)
    out = emitted(TimeSeriesBuffer("instantaneous", f), samples)
    expect = []
    j = 1
    for t, v in samples:
        while t >= j * f:
            expect.append((j * f, v))
            j += 1
    assert [(e.coord, e.value) for e in out] == expect


# server clock


def test_clock_waits_for_all_producers():
    clock = ServerClock({"g": (2, (0, 1)), "h": (3, (1,))})
    assert clock.intake(0, "g", 2, 1.0, 0.5) == []
    assert clock.intake(1, "g", 2, 1.1, 0.4) == [(2, 1.1, 0.4)]
    assert clock.intake(1, "h", 3, 1.5, 0.7) == [(3, 1.5, 0.7)]
    assert clock.intake(1, "g", 6, 3.0, 1.0) == []
    assert clock.intake(1, "g", 4, 2.0, 0.9) == []
    assert clock.intake(0, "g", 4, 2.0, 0.9) == [(4, 2.0, 0.9)]
    with pytest.raises(WriterError):
        clock.intake(1, "g", 4, 2.0, 0.9)
    with pytest.raises(WriterError, match="duplicate"):
        clock.intake(1, "g", 6, 3.0, 1.0)


# collective store


def schema(n=3, title="t"):
    return FileSchema({"title": title}, {"time": 2, "x": n}, {"time": np.array([1.0, 2.0])},
                      {"v": ("<f8", ("time", "x"), {})})


def test_store_collective_cycle(tmp_path):
    store = CollectiveFileStore(2, str(tmp_path))
    for r in range(2):
        store.declare("f.nc", r, schema())
    store.define("f.nc")
    store.define("f.nc")
    store.write("f.nc", 0, "v", (0, 0), np.ones((2, 2)))
    store.write("f.nc", 1, "v", (0, 2), np.full((2, 1), 2.0))
    store.dummy_write("f.nc", 0, "v")
    assert store.close("f.nc", 0) is None
    blob = store.close("f.nc", 1)
    assert (tmp_path / "f.nc").read_bytes() == blob == store.files["f.nc"]
    f = read_sdc(blob)
    assert f.variables["v"].data.tolist() == [[1, 1, 2], [1, 1, 2]]
    assert f.variables["time"].attributes == {"axis": "T", "units": "s"}
    assert store.write_counts("f.nc") == {"v": {0: 2, 1: 1}}


def test_store_errors():
    store = CollectiveFileStore(2)
    store.declare("f", 0, schema())
    with pytest.raises(WriterError, match="1/2"):
        store.define("f")
    store.declare("f", 1, schema(n=4))
    with pytest.raises(WriterError, match="dimension-size"):
        store.define("f")
    with pytest.raises(WriterError, match="attribute"):
        merge_schemas([schema(), schema(title="other")])
    store = CollectiveFileStore(1)
    store.declare("g", 0, schema())
    store.define("g")
    with pytest.raises(WriterError):
        store.dummy_write("g", 0, "nope")
    store.close("g", 0)
    with pytest.raises(WriterError):
        store.declare("g", 0, schema())


def test_gated_define_after_last_trigger():
    for seed in range(20):
        net = Net(4, seed)
        fired = []
        order = []
        progs = []
        for r in range(4):
            def trigger(am, r=r):
                order.append(r)
                gated_file_op(am, "define", "f", "define::f::100.0",
                              lambda op, fid, r=r: fired.append((r, op, fid, len(order))))
            progs.append([trigger])
        assert net.run(progs)
        assert sorted(f[0] for f in fired) == [0, 1, 2, 3]
        assert all(f[3] == 4 for f in fired)


def test_two_files_close_concurrently():
    net = Net(3, 4)
    fired = []
    progs = [[lambda am, n=n: gated_file_op(am, "close", n, f"close::{n}",
                                            lambda op, fid: fired.append(fid))
              for n in (("a", "b") if r % 2 else ("b", "a"))] for r in range(3)]
    assert net.run(progs)
    assert sorted(fired) == ["a"] * 3 + ["b"] * 3
    with pytest.raises(WriterError):
        gated_file_op(net.ams[0], "open", "x", "u", print)


# end to end through the simulated world

from insitu_io.config import parse_config
from insitu_io.harness import SimParams, World, builtin_config, synthesize
from runs import TRACE, replay_world

def test_trigger_replay_partitions_samples():
    w = replay_world()
    res = w.run()
    assert sorted(res.files) == ["replay_100.nc", "replay_200.nc"]
    first = read_sdc(res.files["replay_100.nc"])
    second = read_sdc(res.files["replay_200.nc"])
    t1 = first.variables["time_none_1"].data.tolist()
    t2 = second.variables["time_none_1"].data.tolist()
    assert t1 == [t for t in TRACE if t <= 98.2]
    assert t2[0] == 101.3 and max(t2) <= 199.3
    # the averaged window (50,100] is complete once 101.3 arrives
    assert first.variables["time_averaged_50"].data.tolist() == [50.0, 100.0]
    # (150,200] closes when 201.3 arrives, before the cutoff 199.3 is passed
    assert second.variables["time_averaged_50"].data.tolist() == [150.0, 200.0]
    # nothing at or before the last cutoff is still held by any writer
    held = [e.rep_time for s in w.servers for ss in s.writer.streams.values()
            for st in ss for e in st.stored]
    assert held and min(held) > max(t2)
    assert all(s.writer.idle() for s in w.servers)
    assert all(s.messaging.outstanding_count() == 0 for s in w.servers)


def test_diagnostic_values_match_data():
    w = replay_world(servers=1)
    res = w.run()
    f = read_sdc(res.files["replay_100.nc"])
    # a field included twice gets one variable per time configuration
    vals = f.variables["tke_max_none_1"].data
    ts_list = [i + 1 for i, t in enumerate(TRACE) if t <= 98.2]
    shape = w.producers[0].shape_of("global::tke")
    fid = sorted(w.config.raw_fields()).index("global::tke")
    expect = [max(float(synthesize(fid, p, ts, shape).max()) for p in range(2)) for ts in ts_list]
    assert vals.tolist() == expect
    avg = f.variables["tke_max_averaged_50"].data.tolist()
    total = 0.0
    for v in expect[:25]:
        total += v
    assert avg[0] == total / 25


def test_profile_file_structure():
    cfg = parse_config(builtin_config("profile"), {"x_size": 8, "y_size": 8})
    w = World(cfg, SimParams(servers=2, producers_per_server=2, end_time=210))
    res = w.run()
    f = read_sdc(res.files["profile_ts_100.nc"])
    assert f.variables["time_averaged_10"].data.tolist() == [10.0 * k for k in range(1, 11)]
    assert f.variables["VWP_mean"].dims == ("time_averaged_10",)
    # fields sharing an include share the time dimension
    assert f.variables["w"].dims == f.variables["u"].dims == ("time_instantaneous_5", "z", "y", "x")
    assert f.variables["w"].data.shape[1:] == (4, 8, 8)
    # dummy writes balance collective op counts per variable
    for name in res.files:
        for var, per_server in w.store.write_counts(name).items():
            assert len(set(per_server.values())) == 1, (name, var, per_server)
