"""The writer federator.

Values reach the writer in arbitrary order.  Each stream of values (a
diagnostic, or one producer's chunk of a raw field) passes through an
:class:`OrderedFieldQueue` that releases timesteps strictly in order, then
through one :class:`TimeSeriesBuffer` per file include that applies the time
manipulation.  Emitted values wait in memory until their file is written.

File writes are triggered by model time.  A server clock releases a
timestep once all local producers have delivered it; when the released
model time crosses a multiple of a file's ``write_time_frequency`` W, a
write covering every value whose representative time is at or before the
previous released time (the cutoff) is scheduled.  Crossing several
multiples at once produces a single file, named after the highest one.

The write itself is collective: all servers declare their part of the
schema, meet in a define barrier, perform the same number of write
operations per variable (padding with dummy writes) and meet again in a
close barrier.  The shared :class:`CollectiveFileStore` stands in for the
parallel file system.

Window semantics (output frequency f, window k covers model time
(k*f, (k+1)*f]):

averaged
    running sum and count per window, divided once at emission.  A sample
    beyond the open window emits it with the window end as coordinate and
    the window's last sample time as representative time.  Windows skipped
    entirely, leading ones included, repeat the spanning sample's value.
instantaneous
    the first sample at or after a window's end is that window's snapshot;
    every other sample is discarded.
none
    every sample is emitted at its own model time.
"""

from __future__ import annotations

import logging
import math
import os
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import Config, FileDef, split_qualified
from .errors import WriterError
from .layout import ChunkRect, RegionBuffer, merge_chunks, plan_writes
from .messaging import ActiveMessaging, active_allreduce
from .pipeline import ALL, placements
from .rulegraph import RuleGraph, build_rule_graph
from .sdc import SdcWriter
from .sim import ZERO_COST, CostModel

log = logging.getLogger(__name__)


# time arithmetic -------------------------------------------------------------


def window_index(t: float, f: float) -> int:
    """Index k of the half-open window (k*f, (k+1)*f] holding ``t``."""
    return max(math.ceil(t / f) - 1, 0)


def crossed_boundaries(prev_model_time: float, new_model_time: float, W: float) -> list[float]:
    lo, hi = window_index(prev_model_time, W), window_index(new_model_time, W)
    return [k * W for k in range(lo + 1, hi + 1)]


def check_write_trigger(prev_model_time: float, new_model_time: float, W: float) -> float | None:
    """Cutoff time if (prev, new] crosses a multiple of W, else None."""
    if not new_model_time > prev_model_time:
        raise WriterError(f"model time did not advance ({prev_model_time} -> {new_model_time})")
    return prev_model_time if crossed_boundaries(prev_model_time, new_model_time, W) else None


def output_name(template: str, boundary: float) -> str:
    stem, dot, ext = template.rpartition(".")
    b = str(int(boundary)) if float(boundary).is_integer() else repr(float(boundary))
    return f"{stem}_{b}.{ext}" if dot else f"{template}_{b}"


def time_dimension(manipulation: str, frequency: float) -> str:
    f = str(int(frequency)) if float(frequency).is_integer() else repr(float(frequency))
    return f"time_{manipulation}_{f}"


# ordered intake ----------------------------------------------------------------


class OrderedFieldQueue:
    """Releases timesteps k*frequency (k >= 1) strictly in ascending order."""

    def __init__(self, key: str, frequency: int, expected_next: int | None = None):
        if frequency < 1:
            raise WriterError("frequency must be >= 1")
        self.key = key
        self.frequency = frequency
        self.expected_next = frequency if expected_next is None else expected_next
        self.pending: dict[int, object] = {}

    @property
    def released_through(self) -> int:
        return self.expected_next - self.frequency

    def intake(self, timestep: int, item) -> list[tuple[int, object]]:
        if timestep % self.frequency or timestep <= 0:
            raise WriterError(f"{self.key}: timestep {timestep} is not a sampling step")
        if timestep < self.expected_next or timestep in self.pending:
            raise WriterError(f"{self.key}: duplicate timestep {timestep}")
        self.pending[timestep] = item
        out = []
        while self.expected_next in self.pending:
            out.append((self.expected_next, self.pending.pop(self.expected_next)))
            self.expected_next += self.frequency
        return out


# time manipulation -----------------------------------------------------------


@dataclass(frozen=True)
class Emission:
    coord: float          # time coordinate written to the file
    rep_time: float       # decides which file the value belongs to
    value: object
    count: int
    filled: bool = False


@dataclass
class TimeSeriesBuffer:
    manipulation: str
    frequency: float
    window: int | None = None     # averaged: open window
    total: object = None
    count: int = 0
    rep_time: float = 0.0
    prev_time: float | None = None
    next_window: int = 0          # instantaneous: next window to emit

    def accumulate(self, value, timestep: int, model_time: float) -> list[Emission]:
        t = float(model_time)
        if self.prev_time is not None and not t > self.prev_time:
            raise WriterError(f"non-monotonic model time {t} after {self.prev_time}")
        self.prev_time = t
        f = self.frequency
        if self.manipulation == "none":
            return [Emission(t, t, value, 1)]
        if self.manipulation == "instantaneous":
            out = []
            while t >= (self.next_window + 1) * f:
                out.append(Emission((self.next_window + 1) * f, t, value, 1, bool(out)))
                self.next_window += 1
            return out
        k = window_index(t, f)
        out = []
        if self.window is None:
            out.extend(Emission((j + 1) * f, t, value, 1, True) for j in range(k))
        elif k > self.window:
            mean = self.total / self.count
            out.append(Emission((self.window + 1) * f, self.rep_time, mean, self.count))
            out.extend(Emission((j + 1) * f, t, value, 1, True) for j in range(self.window + 1, k))
        if self.window is None or k > self.window:
            self.window, self.total, self.count = k, value, 1
        else:
            self.total = self.total + value
            self.count += 1
        self.rep_time = t
        return out


def accumulate(buffer: TimeSeriesBuffer, value, timestep: int, model_time: float) -> list[Emission]:
    return buffer.accumulate(value, timestep, model_time)


# server clock ----------------------------------------------------------------


class ServerClock:
    """Releases a timestep once every local producer has delivered it."""

    def __init__(self, groups: dict[str, tuple[int, tuple[int, ...]]]):
        # group -> (frequency, producers sending it)
        self.groups = {g: v for g, v in groups.items() if v[1]}
        self.last_ts = 0
        self.last_time: float | None = None
        self.arrivals: dict[int, dict] = {}

    def _next(self, after: int) -> int | None:
        cands = [(after // f + 1) * f for f, _ in self.groups.values()]
        return min(cands) if cands else None

    def _needed(self, ts: int) -> set:
        return {(p, g) for g, (f, ps) in self.groups.items() if ts % f == 0 for p in ps}

    def intake(self, source: int, group: str, ts: int, model_time: float, sent_at: float):
        if ts <= self.last_ts:
            raise WriterError(f"clock: timestep {ts} from {source} already released")
        a = self.arrivals.setdefault(ts, {"seen": set(), "time": None, "sent_at": None})
        if (source, group) in a["seen"]:
            raise WriterError(f"clock: duplicate ({source}, {group}) at {ts}")
        a["seen"].add((source, group))
        a["time"] = model_time if a["time"] is None else max(a["time"], model_time)
        a["sent_at"] = sent_at if a["sent_at"] is None else min(a["sent_at"], sent_at)
        out = []
        while True:
            nxt = self._next(self.last_ts)
            a = self.arrivals.get(nxt)
            if a is None or a["seen"] != self._needed(nxt):
                return out
            del self.arrivals[nxt]
            out.append((nxt, a["time"], a["sent_at"]))
            self.last_ts, self.last_time = nxt, a["time"]


# file write states -----------------------------------------------------------


@dataclass
class FileWriteState:
    file: str
    boundary: float
    boundaries: tuple[float, ...]
    cutoff_ts: int
    cutoff_time: float
    trigger_sent_at: float = 0.0
    trigger_seen_at: float = 0.0
    stage: str = "waiting"
    outstanding: set = field(default_factory=set)

    @property
    def output(self) -> str:
        return output_name(self.file, self.boundary)


@dataclass
class FileSchema:
    attributes: dict = field(default_factory=dict)
    dimensions: dict = field(default_factory=dict)
    coords: dict = field(default_factory=dict)
    variables: dict = field(default_factory=dict)   # name -> (dtype, dims, attrs)


@dataclass
class FileImage:
    """One server's part of a file: its schema and its write operations."""

    name: str
    schema: FileSchema
    writes: list                      # (var, start, data)
    counts: dict                      # var -> global write count

    def nbytes(self) -> int:
        return sum(np.asarray(d).nbytes for _, _, d in self.writes)

    def to_sdc(self) -> bytes:
        """Serialise as if this server were the only writer."""
        store = CollectiveFileStore(1)
        store.declare(self.name, 0, self.schema)
        store.define(self.name)
        for var, start, data in self.writes:
            store.write(self.name, 0, var, start, data)
        return store.close(self.name, 0)


def merge_schemas(schemas: list[FileSchema]) -> FileSchema:
    out = FileSchema()
    for s in schemas:
        for k, v in s.attributes.items():
            if k in out.attributes and out.attributes[k] != v:
                raise WriterError(f"servers disagree on attribute {k}: {out.attributes[k]!r} vs {v!r}")
            out.attributes[k] = v
        for d, n in s.dimensions.items():
            if d in out.dimensions and out.dimensions[d] != n:
                raise WriterError(f"dimension-size disagreement on {d}: {out.dimensions[d]} vs {n}")
            out.dimensions[d] = n
        for d, c in s.coords.items():
            if d in out.coords and out.coords[d].tobytes() != c.tobytes():
                raise WriterError(f"servers disagree on coordinate values of {d}")
            out.coords[d] = c
        for v, decl in s.variables.items():
            if v in out.variables and out.variables[v] != decl:
                raise WriterError(f"servers disagree on variable {v}")
            out.variables[v] = decl
    return out


class CollectiveFileStore:
    """Shared stand-in for a parallel file system with collective semantics.

    ``declare`` (every server, before the define barrier), ``define`` (inside
    the barrier callback; the first call merges the schemas), ``write`` /
    ``dummy_write`` and ``close``.  When the last server closes, the file is
    serialised and, with ``out_dir`` set, written to disk.
    """

    def __init__(self, num_servers: int, out_dir: str | None = None):
        self.num_servers = num_servers
        self.out_dir = out_dir
        self._lock = threading.RLock()
        self._declared: dict[str, dict[int, FileSchema]] = {}
        self._writers: dict[str, SdcWriter] = {}
        self._closed: dict[str, set] = {}
        self.op_counts: dict[tuple[str, str, int], int] = {}
        self.files: dict[str, bytes] = {}

    def declare(self, name: str, rank: int, schema: FileSchema) -> None:
        with self._lock:
            if name in self._writers or name in self.files:
                raise WriterError(f"{name}: declared after definition")
            self._declared.setdefault(name, {})[rank] = schema

    def define(self, name: str) -> None:
        with self._lock:
            if name in self._writers:
                return
            decl = self._declared.get(name, {})
            if len(decl) != self.num_servers:
                raise WriterError(f"{name}: defined with {len(decl)}/{self.num_servers} declarations")
            merged = merge_schemas([decl[r] for r in sorted(decl)])
            w = SdcWriter(merged.attributes)
            for d in sorted(merged.dimensions):
                w.define_dimension(d, merged.dimensions[d])
            for d in sorted(merged.coords):
                w.define_variable(d, "<f8", (d,), {"units": "s", "axis": "T"})
            for v in sorted(merged.variables):
                dt, dims, attrs = merged.variables[v]
                w.define_variable(v, dt, dims, attrs)
            w.enddef()
            for d, c in merged.coords.items():
                w.write_region(d, (0,), c)
            self._writers[name] = w
            self._closed[name] = set()

    def _count(self, name, var, rank):
        k = (name, var, rank)
        self.op_counts[k] = self.op_counts.get(k, 0) + 1

    def write(self, name: str, rank: int, var: str, start, data) -> None:
        with self._lock:
            self._writers[name].write_region(var, start, data)
            self._count(name, var, rank)

    def dummy_write(self, name: str, rank: int, var: str) -> None:
        with self._lock:
            if var not in self._writers[name].file.variables:
                raise WriterError(f"{name}: dummy write to undefined variable {var}")
            self._count(name, var, rank)

    def close(self, name: str, rank: int) -> bytes | None:
        with self._lock:
            closed = self._closed[name]
            if rank in closed:
                raise WriterError(f"{name}: closed twice by {rank}")
            closed.add(rank)
            if len(closed) < self.num_servers:
                return None
            blob = self._writers.pop(name).to_bytes()
            self._declared.pop(name, None)
            self.files[name] = blob
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            with open(os.path.join(self.out_dir, name), "wb") as fh:
                fh.write(blob)
        return blob

    def write_counts(self, name: str) -> dict[str, dict[int, int]]:
        out: dict[str, dict[int, int]] = {}
        for (f, var, rank), n in self.op_counts.items():
            if f == name:
                out.setdefault(var, {})[rank] = n
        return out


def gated_file_op(messaging: ActiveMessaging, op_kind: str, file_id: str, uid: str,
                  action: Callable[[str, str], None]) -> None:
    """Run ``action(op_kind, file_id)`` once every server has reached ``uid``."""
    if op_kind not in ("define", "close"):
        raise WriterError(f"unknown file operation {op_kind!r}")
    messaging.active_barrier(uid, lambda payload, count, tag, u: action(op_kind, file_id))


# the federator -----------------------------------------------------------------


@dataclass
class Stream:
    file: str
    var: str
    field: str
    key: str
    source: int | None
    buffer: TimeSeriesBuffer
    stored: list = field(default_factory=list)

    @property
    def sid(self) -> str:
        return f"{self.file}|{self.var}|{self.key}"


@dataclass
class VarSpec:
    name: str
    field: str
    raw: bool
    manipulation: str
    frequency: float
    attrs: dict
    dims: tuple | None = None
    writer_rank: int | None = None     # diagnostics: the server holding the value


@dataclass(frozen=True)
class ProducerInfo:
    rank: int
    chunk: ChunkRect
    fields: frozenset
    groups: frozenset


@dataclass
class OverheadRecord:
    server: int
    file: str
    boundary: float
    trigger_time: float
    trigger_seen: float
    completion_time: float

    @property
    def overhead(self) -> float:
        return self.completion_time - self.trigger_time


class WriterFederator:
    """Per-server writer.  Call :meth:`configure` once the handshake is done."""

    def __init__(self, config: Config, rank: int, num_servers: int, executor,
                 messaging: ActiveMessaging | None, store: CollectiveFileStore,
                 options: dict | None = None, graph: RuleGraph | None = None,
                 costs: CostModel = ZERO_COST, clock: Callable[[], float] = lambda: 0.0,
                 hold_after: int | None = None):
        self.config = config
        self.graph = graph or build_rule_graph(config)
        self.rank = rank
        self.num_servers = num_servers
        self.executor = executor
        self.messaging = messaging
        self.store = store
        self.options = dict(options or {})
        self.costs = costs
        self.now = clock
        self.hold_after = hold_after
        self.held = 0
        self._lock = threading.RLock()
        self.epoch = 0
        self._plans: dict = {}
        place, _ = placements(self.graph, config.raw_fields(), num_servers)
        self.place = place
        self.files = {f.name: f for f in config.writing.files}
        self.vars = {f.name: self._var_specs(f) for f in config.writing.files}
        self.configured = False
        self.queues: dict[str, OrderedFieldQueue] = {}
        self.streams: dict[str, list[Stream]] = {}
        self.file_states: list[FileWriteState] = []
        self.inflight: dict[str, tuple[FileWriteState, FileImage]] = {}
        self.finished_keys: set = set()
        self.written: list[str] = []
        self.overheads: list[OverheadRecord] = []
        self.plan_counts: dict[str, int] | None = None
        self.clock: ServerClock | None = None
        self._prev_tick: tuple | None = None
        self.producers: dict[int, ProducerInfo] = {}

    # configuration --------------------------------------------------------

    def _var_specs(self, fdef: FileDef) -> list[VarSpec]:
        raw = self.config.raw_fields()
        diags = {d.qname: d for d in self.config.diagnostics}
        specs, names = [], {}
        for q, inc in self.config.file_targets(fdef):
            ns, base = split_qualified(q)
            name = base if ns == "global" else q
            attrs = {"time_manipulation": inc.time_manipulation,
                     "output_frequency": inc.output_frequency}
            if q in raw:
                f = raw[q]
                if not f.collective or not f.dims:
                    raise WriterError(
                        f"file {fdef.name}: raw field {q} must be collective with declared dims")
                spec = VarSpec(name, q, True, inc.time_manipulation, inc.output_frequency,
                               attrs, f.dims)
            else:
                d = diags[q]
                p = self.place[self.graph.finals[q]]
                writer = 0 if p == ALL else p[1]
                attrs.update(d.attributes)
                if d.units is not None:
                    attrs["units"] = d.units
                spec = VarSpec(name, q, False, inc.time_manipulation, inc.output_frequency,
                               attrs, None, writer)
            names.setdefault(name, []).append(spec)
            specs.append(spec)
        for name, group in names.items():
            if len(group) > 1:
                for s in group:
                    s.name = f"{name}_{time_dimension(s.manipulation, s.frequency)[5:]}"
        if len({s.name for s in specs}) != len(specs):
            raise WriterError(f"file {fdef.name}: the same field is included twice identically")
        return specs

    def _frequency_of(self, field_q: str) -> int:
        if field_q in self.config.raw_fields():
            return self.config.definition_of(field_q).frequency
        return self.config.definition(self.graph.groups[field_q]).frequency

    def configure(self, producers: dict[int, ProducerInfo]) -> None:
        """Set up queues, buffers, the clock and the collective write plan."""
        with self._lock:
            self.producers = dict(producers)
            self._plans = {}
            groups = {}
            for d in self.config.data_definitions:
                ps = tuple(sorted(p for p, info in producers.items() if d.qname in info.groups))
                groups[d.qname] = (d.frequency, ps)
            self.clock = ServerClock(groups)
            for fname, specs in self.vars.items():
                for spec in specs:
                    if spec.raw:
                        for p in sorted(producers):
                            if spec.field in producers[p].fields:
                                self._add_stream(fname, spec, f"{spec.field}@{p}", p)
                    elif spec.writer_rank == self.rank:
                        self._add_stream(fname, spec, spec.field, None)
            self.configured = True
        self._start_plan()

    def _add_stream(self, fname, spec: VarSpec, key, source):
        if key not in self.queues:
            self.queues[key] = OrderedFieldQueue(key, self._frequency_of(spec.field))
        buf = TimeSeriesBuffer(spec.manipulation, spec.frequency)
        self.streams.setdefault(key, []).append(Stream(fname, spec.name, spec.field, key, source, buf))

    def distributed_fields(self) -> list[str]:
        return sorted({s.field for specs in self.vars.values() for s in specs if s.raw})

    def local_chunks(self, field_q: str) -> list[ChunkRect]:
        return [info.chunk for p, info in sorted(self.producers.items()) if field_q in info.fields]

    def local_region_counts(self) -> list[int]:
        return [len(merge_chunks(self.local_chunks(f))) for f in self.distributed_fields()]

    def _start_plan(self):
        fields = self.distributed_fields()
        if not fields:
            self._plan_ready({})
            return
        local = np.array(self.local_region_counts(), dtype=np.int64)
        if self.messaging is None or self.num_servers == 1:
            self._plan_ready(dict(zip(fields, local.tolist())))
            return

        def done(payload, count, tag, uid):
            self._plan_ready(dict(zip(fields, np.asarray(payload).tolist())))
        active_allreduce(self.messaging, local, "max", "writeplan", done)

    def _plan_ready(self, counts):
        with self._lock:
            self.plan_counts = {k: int(v) for k, v in counts.items()}
            self._advance_files()

    # intake -----------------------------------------------------------------

    def _held(self, ts) -> bool:
        if self.hold_after is not None and ts > self.hold_after:
            self.held += 1
            return True
        return False

    def on_diagnostic(self, diag: str, timestep: int, model_time: float, value) -> None:
        if diag not in self.queues:
            return
        self._intake(diag, timestep, model_time, value)

    def on_raw(self, source: int, fields: dict, timestep: int, model_time: float) -> None:
        for q, value in fields.items():
            key = f"{q}@{source}"
            if key in self.queues:
                self._intake(key, timestep, model_time, value)

    def on_clock(self, source: int, group: str, timestep: int, model_time: float,
                 sent_at: float = 0.0) -> None:
        with self._lock:
            if self._held(timestep):
                return
            self.epoch += 1
            for ts, t, sent in self.clock.intake(source, group, timestep, model_time, sent_at):
                self._clock_tick(ts, t, sent)
            self._advance_files()

    def _intake(self, key, ts, t, value):
        with self._lock:
            if self._held(ts):
                return
            self.epoch += 1
            for rts, (rt, rv) in self.queues[key].intake(ts, (t, value)):
                for s in self.streams[key]:
                    s.stored.extend(s.buffer.accumulate(rv, rts, rt))
            self._advance_files()

    def _clock_tick(self, ts, t, sent_at):
        prev = self._prev_tick
        self._prev_tick = (ts, t)
        if prev is None:
            return
        pts, pt = prev
        for fname, fdef in self.files.items():
            bs = crossed_boundaries(pt, t, fdef.write_time_frequency)
            if bs:
                self.file_states.append(FileWriteState(
                    fname, bs[-1], tuple(bs), pts, pt, sent_at, self.now()))

    def producer_done(self, source: int) -> None:
        with self._lock:
            for key, streams in self.streams.items():
                if streams[0].source == source:
                    self.finished_keys.add(key)
            self._advance_files()

    # file writes ------------------------------------------------------------

    def outstanding(self, st: FileWriteState) -> set:
        out = set()
        for key, streams in self.streams.items():
            if any(s.file == st.file for s in streams) and key not in self.finished_keys:
                if self.queues[key].released_through <= st.cutoff_ts:
                    out.add(key)
        return out

    def _advance_files(self):
        if self.plan_counts is None:
            return
        for st in [s for s in self.file_states if s.stage == "waiting"]:
            st.outstanding = self.outstanding(st)
            if st.outstanding:
                # later states of the same file cannot overtake this one
                continue
            if any(o.file == st.file and o.stage == "waiting" and o.boundary < st.boundary
                   for o in self.file_states):
                continue
            self._begin_write(st)

    def assemble_file(self, st: FileWriteState) -> FileImage:
        """Extract this server's values for ``st`` and build its part of the file."""
        if self.outstanding(st):
            raise WriterError(f"{st.output}: fields outstanding {sorted(self.outstanding(st))}")
        fdef = self.files[st.file]
        schema = FileSchema(attributes={
            "title": fdef.title, "model_time": st.cutoff_time, "timestep": st.cutoff_ts,
            "boundaries": list(st.boundaries), "write_time_frequency": fdef.write_time_frequency,
        })
        writes, counts = [], {}
        for spec in self.vars[st.file]:
            streams = [s for ss in self.streams.values() for s in ss
                       if s.file == st.file and s.var == spec.name]
            taken = {}
            for s in streams:
                n = 0
                while n < len(s.stored) and s.stored[n].rep_time <= st.cutoff_time:
                    n += 1
                taken[s.source], s.stored[:] = s.stored[:n], s.stored[n:]
            td = time_dimension(spec.manipulation, spec.frequency)
            if spec.raw:
                counts[spec.name] = self.plan_counts.get(spec.field, 0)
                if counts[spec.name] == 0:
                    continue
                dims = spec.dims
                sizes = {}
                for d in dims:
                    key = f"{d}_size"
                    if key not in self.options:
                        raise WriterError(f"global size of dimension {d} unknown (option {key})")
                    sizes[d] = int(self.options[key])
                entries = list(taken.values())
                if entries:
                    self._add_time(schema, td, entries, spec.name)
                    schema.dimensions.update(sizes)
                    schema.variables[spec.name] = ("<f8", (td,) + tuple(dims), spec.attrs)
                    writes.extend(self._region_writes(spec, taken))
            else:
                counts[spec.name] = 1
                if spec.writer_rank != self.rank:
                    continue
                entries = taken.get(None, [])
                self._add_time(schema, td, [entries], spec.name)
                shape = np.shape(entries[0].value) if entries else ()
                extra = tuple(f"{spec.name}_d{i}" for i in range(len(shape)))
                for d, n in zip(extra, shape):
                    schema.dimensions[d] = n
                schema.variables[spec.name] = ("<f8", (td,) + extra, spec.attrs)
                data = np.array([e.value for e in entries], dtype="<f8").reshape((len(entries),) + shape)
                writes.append((spec.name, (0,) * (1 + len(shape)), data))
        return FileImage(st.output, schema, writes, counts)

    def _add_time(self, schema: FileSchema, td, entry_lists, var):
        coords = None
        for entries in entry_lists:
            c = np.array([e.coord for e in entries], dtype="<f8")
            if coords is not None and c.tobytes() != coords.tobytes():
                raise WriterError(f"{var}: producers disagree on time coordinates")
            coords = c
        if td in schema.coords and schema.coords[td].tobytes() != coords.tobytes():
            raise WriterError(f"{td}: fields sharing the dimension disagree on coordinates")
        schema.coords[td] = coords
        schema.dimensions[td] = len(coords)

    def _region_writes(self, spec: VarSpec, taken: dict):
        plan = self._plans.get(spec.field)
        if plan is None:
            plan = self._plans[spec.field] = plan_writes(self.local_chunks(spec.field),
                                                         self.plan_counts[spec.field])
        nt = len(next(iter(taken.values())))
        out = []
        for region in plan.regions:
            buf = RegionBuffer(region, (nt,))
            for chunk in region.members:
                entries = taken[chunk.owner]
                payload = np.stack([np.asarray(e.value, dtype="<f8").reshape(chunk.extent)
                                    for e in entries]) if entries else \
                    np.zeros((0,) + chunk.extent)
                buf.copy(chunk, payload)
            out.append((spec.name, (0,) + region.start, buf.data))
        return out

    def _begin_write(self, st: FileWriteState):
        st.stage = "defining"
        image = self.assemble_file(st)
        self.epoch += 1
        self.inflight[st.output] = (st, image)
        self.store.declare(st.output, self.rank, image.schema)
        uid = f"define::{st.file}::{st.boundary!r}"
        if self.messaging is None:
            self.executor.submit(self._defined, "define", st.output, cost=self.costs.file_define)
        else:
            gated_file_op(self.messaging, "define", st.output, uid, self._on_define)

    def _on_define(self, op, name):
        self.executor.submit(self._defined, op, name, cost=self.costs.file_define)

    def _defined(self, op, name):
        self.store.define(name)
        st, image = self.inflight[name]
        st.stage = "writing"
        self.epoch += 1
        elements = sum(np.asarray(d).size for _, _, d in image.writes)
        self.executor.submit(self._write_all, name, cost=self.costs.write(elements))

    def _write_all(self, name):
        st, image = self.inflight[name]
        done = {}
        for var, start, data in image.writes:
            self.store.write(name, self.rank, var, start, data)
            done[var] = done.get(var, 0) + 1
        for var, total in sorted(image.counts.items()):
            if total == 0:
                continue
            if done.get(var, 0) > total:
                raise WriterError(f"{name}/{var}: {done[var]} writes exceed the global count {total}")
            for _ in range(total - done.get(var, 0)):
                self.store.dummy_write(name, self.rank, var)
        st.stage = "closing"
        uid = f"close::{st.file}::{st.boundary!r}"
        if self.messaging is None:
            self.executor.submit(self._closed, "close", name, cost=self.costs.file_close)
        else:
            gated_file_op(self.messaging, "close", name, uid,
                          lambda op, n: self.executor.submit(self._closed, op, n,
                                                             cost=self.costs.file_close))

    def _closed(self, op, name):
        self.store.close(name, self.rank)
        with self._lock:
            st, _ = self.inflight.pop(name)
            self.file_states.remove(st)
            self.written.append(name)
            self.overheads.append(OverheadRecord(
                self.rank, name, st.boundary, st.trigger_sent_at, st.trigger_seen_at, self.now()))
            self.epoch += 1
            self._advance_files()

    # termination / accounting ------------------------------------------------

    def finish(self) -> list[str]:
        """Drop file states that can never become ready; returns their names."""
        with self._lock:
            dropped = []
            for st in list(self.file_states):
                if st.stage == "waiting":
                    log.warning("server %d: dropping unsatisfiable write of %s (outstanding %s)",
                                self.rank, st.output, sorted(self.outstanding(st)))
                    self.file_states.remove(st)
                    dropped.append(st.output)
            return dropped

    def stored_values(self, file: str | None = None) -> int:
        with self._lock:
            n = sum(len(s.stored) for ss in self.streams.values() for s in ss
                    if file is None or s.file == file)
            n += sum(len(img.writes) for st, img in self.inflight.values()
                     if file is None or st.file == file)
            return n

    def idle(self) -> bool:
        with self._lock:
            return not self.inflight

    # state export for checkpointing -----------------------------------------

    def export_state(self) -> list[dict]:
        """The five checkpoint areas, referencing live data (no copies)."""
        with self._lock:
            registry = {
                "rank": self.rank,
                "num_servers": self.num_servers,
                "clock": {
                    "last_ts": self.clock.last_ts,
                    "last_time": self.clock.last_time,
                    "prev_tick": list(self._prev_tick) if self._prev_tick else None,
                    "arrivals": [[ts, sorted([p, g] for p, g in a["seen"]), a["time"], a["sent_at"]]
                                 for ts, a in sorted(self.clock.arrivals.items())],
                },
                "written": list(self.written),
                "finished": sorted(self.finished_keys),
            }
            buffers = {}
            stored = {}
            for key in sorted(self.streams):
                for s in self.streams[key]:
                    b = s.buffer
                    buffers[s.sid] = {
                        "manipulation": b.manipulation, "frequency": b.frequency,
                        "window": b.window, "total": b.total, "count": b.count,
                        "rep_time": b.rep_time, "prev_time": b.prev_time,
                        "next_window": b.next_window,
                    }
                    stored[s.sid] = [[e.coord, e.rep_time, e.value, e.count, e.filled]
                                     for e in s.stored]
            queues = {key: {"expected_next": q.expected_next,
                            "pending": [[ts, t, v] for ts, (t, v) in sorted(q.pending.items())]}
                      for key, q in sorted(self.queues.items())}
            files = [{"file": st.file, "boundary": st.boundary, "boundaries": list(st.boundaries),
                      "cutoff_ts": st.cutoff_ts, "cutoff_time": st.cutoff_time,
                      "trigger_sent_at": st.trigger_sent_at, "trigger_seen_at": st.trigger_seen_at,
                      "stage": st.stage}
                     for st in self.file_states]
            return [registry, buffers, queues, files, stored]

    def import_state(self, areas: list[dict]) -> None:
        """Load areas produced by :meth:`export_state`; call after :meth:`configure`."""
        registry, buffers, queues, files, stored = areas
        with self._lock:
            if registry["num_servers"] != self.num_servers or registry["rank"] != self.rank:
                raise WriterError("checkpoint was taken with a different server layout")
            c = registry["clock"]
            self.clock.last_ts, self.clock.last_time = c["last_ts"], c["last_time"]
            self.clock.arrivals = {
                ts: {"seen": {(p, g) for p, g in seen}, "time": t, "sent_at": sent}
                for ts, seen, t, sent in c["arrivals"]}
            self._prev_tick = tuple(c["prev_tick"]) if c["prev_tick"] else None
            self.written = list(registry["written"])
            self.finished_keys = set(registry["finished"])
            by_sid = {s.sid: s for ss in self.streams.values() for s in ss}
            if set(by_sid) != set(buffers):
                raise WriterError("checkpoint streams do not match this configuration")
            for sid, b in buffers.items():
                s = by_sid[sid]
                s.buffer = TimeSeriesBuffer(b["manipulation"], b["frequency"], b["window"],
                                            b["total"], b["count"], b["rep_time"],
                                            b["prev_time"], b["next_window"])
                s.stored = [Emission(*e) for e in stored[sid]]
            if set(queues) != set(self.queues):
                raise WriterError("checkpoint queues do not match this configuration")
            for key, q in queues.items():
                self.queues[key].expected_next = q["expected_next"]
                self.queues[key].pending = {ts: (t, v) for ts, t, v in q["pending"]}
            self.file_states = []
            for f in files:
                if f["stage"] != "waiting":
                    raise WriterError("checkpoint captured a file write in progress")
                self.file_states.append(FileWriteState(
                    f["file"], f["boundary"], tuple(f["boundaries"]), f["cutoff_ts"],
                    f["cutoff_time"], f["trigger_sent_at"], f["trigger_seen_at"]))
            self.epoch += 1
            self._advance_files()
