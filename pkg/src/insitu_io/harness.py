"""Simulated world: synthetic producers and IO-server actors.

Producers are laid out row-major on a (y, x) grid; producer ``p`` belongs to
server ``p // producers_per_server`` and owns the chunk
``(0, iy*ny, ix*nx) + (nz, ny, nx)``.  All producers share one model seed,
so they step through the same model-time sequence::

    dt(0) = dt0,  dt(k+1) = clamp(dt(k) * u, dt_min, dt_max),  u ~ U(u_lo, u_hi)

Field values follow a closed form so any result can be recomputed by an
independent oracle (see :func:`synthesize`).

A run is a single-threaded discrete-event simulation: the transport, the
per-server pools and the producers' compute steps all advance the same
virtual clock.
"""

from __future__ import annotations

import functools
import json
import logging
import math
import random
import statistics
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .config import Config
from .errors import DeadlockError, HandshakeError, ProtocolError
from .layout import ChunkRect
from .messaging import (ActiveMessaging, MsgType, TransportMessage, decode_data, decode_json,
                        encode_data, encode_json)
from .pipeline import DataEvent, DiagnosticsFederator
from .rulegraph import build_rule_graph
from .sim import CostModel, EventLoop, SimPool, Transport, TransportConfig, current_context
from .writer import CollectiveFileStore, OverheadRecord, ProducerInfo, WriterFederator

log = logging.getLogger(__name__)


# producers -----------------------------------------------------------------


def timestep_sequence(seed: int, dt0: float = 1.0, dt_min: float = 0.25, dt_max: float = 2.0,
                      band: tuple[float, float] = (0.8, 1.25)) -> Iterator[tuple[int, float]]:
    """Yield (timestep, model time) pairs starting at timestep 1."""
    rng = random.Random(seed)
    dt, t, ts = dt0, 0.0, 0
    while True:
        ts += 1
        t += dt
        yield ts, t
        dt = min(max(dt * rng.uniform(*band), dt_min), dt_max)


@functools.lru_cache(maxsize=None)
def data_phase(data_seed: int) -> float:
    return random.Random(data_seed).uniform(0.0, 2.0 * math.pi)


def synthesize(field_id: int, rank: int, timestep: int, shape, data_seed: int = 0) -> np.ndarray:
    """v = 1 + 0.5*sin(1e-3*i*(1+field_id) + 0.37*rank + 0.053*timestep + phase(data_seed)).

    ``i`` is the row-major linear index within the producer's local array.
    """
    n = int(np.prod(shape, dtype=np.int64))
    idx = np.arange(n, dtype=np.float64)
    arg = 1e-3 * idx * (1 + field_id) + 0.37 * rank + 0.053 * timestep + data_phase(data_seed)
    return (1.0 + 0.5 * np.sin(arg)).reshape(shape)


def grid_shape(total: int) -> tuple[int, int]:
    """(py, px) with py*px == total and py the largest divisor <= sqrt(total)."""
    py = max(d for d in range(1, int(math.isqrt(total)) + 1) if total % d == 0)
    return py, total // py


def builtin_config(name: str) -> str:
    """Text of a configuration shipped with the package (``profile`` or ``simple``)."""
    from importlib.resources import files

    return files("insitu_io").joinpath("configs", f"{name}.xml").read_text()


@dataclass(frozen=True)
class SimParams:
    servers: int = 1
    producers_per_server: int = 1
    end_time: float = 10.0
    pool_size: int = 16
    model_seed: int = 0
    data_seed: int = 0
    transport: TransportConfig = field(default_factory=TransportConfig)
    costs: CostModel = field(default_factory=CostModel)
    chunk: tuple[int, int, int] = (4, 4, 4)          # (nz, ny, nx) per producer
    dt0: float = 1.0
    dt_min: float = 0.25
    dt_max: float = 2.0
    dt_band: tuple[float, float] = (0.8, 1.25)
    model_times: tuple[float, ...] | None = None     # explicit trace instead of the random walk
    step_time: float = 0.01                          # virtual seconds of compute per timestep
    checkpoint_at: int | None = None
    restore_from: bytes | None = None
    out_dir: str | None = None
    options: dict = field(default_factory=dict)
    omit_fields: dict = field(default_factory=dict)  # producer rank -> field qnames not provided
    quiesce_timeout: float = 1e9
    max_events: int = 50_000_000


def model_options(params: SimParams) -> dict:
    """Global grid sizes for placeholder substitution, plus any explicit options."""
    py, px = grid_shape(params.servers * params.producers_per_server)
    nz, ny, nx = params.chunk
    return {"z_size": nz, "y_size": py * ny, "x_size": px * nx, **params.options}


class Producer:
    """A computational core: steps model time and fires field data at its server."""

    def __init__(self, world: "World", rank: int, chunk: ChunkRect, provides: list[str]):
        self.world = world
        self.rank = rank
        self.server = rank // world.params.producers_per_server
        self.chunk = chunk
        self.provides = provides
        self.address = ("producer", rank)
        self.sent = 0
        self.done = False
        self.groups = [d for d in world.config.data_definitions
                       if any(f.qname in provides for f in d.fields)]
        self.finished_groups: set = set()
        self.steps = world.time_source()
        self.start_after = 0
        self.field_ids = {q: i for i, q in enumerate(sorted(world.config.raw_fields()))}

    def send(self, msg_type, payload):
        self.world.transport.send(TransportMessage(msg_type, self.address, ("server", self.server),
                                                   payload))

    def start(self):
        self.send(MsgType.REGISTER, encode_json({
            "rank": self.rank, "start": list(self.chunk.start), "extent": list(self.chunk.extent),
            "fields": sorted(self.provides)}))

    def receive(self, msg):
        if msg.msg_type != MsgType.FIELD_SPEC:
            raise ProtocolError(f"producer {self.rank}: unexpected {msg.msg_type!r}")
        spec = decode_json(msg.payload)
        sizes = {q: list(self.shape_of(q)) for q in spec["fields"]}
        self.send(MsgType.FIELD_SIZES, encode_json({"rank": self.rank, "sizes": sizes}))
        if self.start_after:
            for ts, t in self.steps:
                if ts == self.start_after:
                    self.world.check_restart_time(t)
                    break
        self.world.loop.schedule(self.world.params.step_time, self.step)

    def shape_of(self, q: str):
        f = self.world.config.raw_fields()[q]
        nz, ny, nx = self.chunk.extent
        if f.dims:
            sizes = {"z": nz, "y": ny, "x": nx}
            unknown = [d for d in f.dims if d not in sizes]
            if unknown:
                raise HandshakeError(f"field {q}: cannot resolve dimension(s) {unknown}")
            return tuple(sizes[d] for d in f.dims)
        if f.kind == "array":
            return (ny * nx,)
        return ()

    def step(self):
        nxt = next(self.steps, None)
        if nxt is None:
            # an explicit trace ran out before end_time
            self.finished_groups.update(g.qname for g in self.groups)
            self.done = True
            self.send(MsgType.DONE, encode_json({"rank": self.rank, "count": self.sent}))
            return
        ts, t = nxt
        end = self.world.params.end_time
        for g in self.groups:
            if ts % g.frequency or g.qname in self.finished_groups:
                continue
            fields = {f.qname: synthesize(self.field_ids[f.qname], self.rank, ts,
                                          self.shape_of(f.qname), self.world.params.data_seed)
                      for f in g.fields if f.qname in self.provides}
            self.send(MsgType.DATA, encode_data(g.qname, ts, t, fields))
            self.sent += 1
            if t > end:
                self.finished_groups.add(g.qname)
        if len(self.finished_groups) == len(self.groups):
            self.done = True
            self.send(MsgType.DONE, encode_json({"rank": self.rank, "count": self.sent}))
        else:
            self.world.loop.schedule(self.world.params.step_time, self.step)


# servers ---------------------------------------------------------------------


class IOServer:
    def __init__(self, world: "World", rank: int, producers: list[int]):
        self.world = world
        self.rank = rank
        self.address = ("server", rank)
        self.local_producers = producers
        p = world.params
        self.pool = SimPool(world.loop, p.pool_size, f"server{rank}")
        self.messaging = ActiveMessaging(rank, p.servers, self._send_active, self.pool,
                                         lambda: world.loop.now, p.costs.callback)
        self.writer = WriterFederator(world.config, rank, p.servers, self.pool, self.messaging,
                                      world.store, world.options, world.graph, p.costs,
                                      lambda: world.loop.now, hold_after=p.checkpoint_at)
        self.pipeline = DiagnosticsFederator(world.config, rank, p.servers, self.pool,
                                             self.messaging, self.writer.on_diagnostic,
                                             world.options, world.graph, p.costs)
        self.registered: dict[int, dict] = {}
        self.sizes: dict[int, dict] = {}
        self.ready = False
        self.stash: list = []
        self.received: dict[int, int] = {q: 0 for q in producers}
        self.done_counts: dict[int, int] = {}
        self.finished: set = set()
        self.violations: list[str] = []

    def _send_active(self, dest, payload, uid):
        self.world.transport.send(TransportMessage(MsgType.ACTIVE, self.address, ("server", dest),
                                                   payload, uid))

    def on_message(self, msg: TransportMessage):
        # runs on the delivery path: hand everything to the pool
        if current_context() != "transport":
            self.violations.append("delivery outside transport context")
        costs = self.world.params.costs
        if msg.msg_type == MsgType.ACTIVE:
            self.messaging.deliver(replace(msg, source=msg.source[1]))
        elif msg.msg_type == MsgType.DATA:
            self.pool.submit(self._on_data, msg, cost=costs.data(len(msg.payload) // 8))
        else:
            self.pool.submit(self._on_control, msg, cost=costs.callback)

    def _check_pool(self):
        if current_context() != "pool":
            self.violations.append("handler outside the pool")

    def _on_control(self, msg):
        self._check_pool()
        body = decode_json(msg.payload)
        p = body["rank"]
        if p not in self.received:
            raise HandshakeError(f"server {self.rank}: producer {p} is not served here")
        if msg.msg_type == MsgType.REGISTER:
            self._register(p, body)
        elif msg.msg_type == MsgType.FIELD_SIZES:
            self._sizes(p, body["sizes"])
        elif msg.msg_type == MsgType.DONE:
            self.done_counts[p] = body["count"]
            self._check_done(p)
        else:
            raise ProtocolError(f"server {self.rank}: unexpected {msg.msg_type!r}")

    def _register(self, p, body):
        have = set(body["fields"])
        for q, f in self.world.config.raw_fields().items():
            if not f.optional and q not in have:
                raise HandshakeError(f"producer {p} does not provide non-optional field {q}")
        unknown = have - set(self.world.config.raw_fields())
        if unknown:
            raise HandshakeError(f"producer {p} offers unknown fields {sorted(unknown)}")
        self.registered[p] = body
        self.world.transport.send(TransportMessage(
            MsgType.FIELD_SPEC, self.address, ("producer", p),
            encode_json({"fields": sorted(have)})))

    def _sizes(self, p, sizes):
        reg = self.registered[p]
        for q, shape in sizes.items():
            f = self.world.config.raw_fields()[q]
            if f.dims and f.collective and list(shape) != reg["extent"]:
                raise HandshakeError(f"producer {p}: {q} has shape {shape}, chunk is {reg['extent']}")
        self.sizes[p] = sizes
        if len(self.sizes) == len(self.local_producers):
            self._complete_handshake()

    def _complete_handshake(self):
        infos = {}
        groups_of = {}
        for p, reg in sorted(self.registered.items()):
            fields = frozenset(reg["fields"])
            groups = frozenset(d.qname for d in self.world.config.data_definitions
                               if any(f.qname in fields for f in d.fields))
            infos[p] = ProducerInfo(p, ChunkRect(reg["start"], reg["extent"], p), fields, groups)
            groups_of[p] = set(fields)
        self.pipeline.set_sources(groups_of)
        self.writer.configure(infos)
        if self.world.restore_areas is not None:
            self.writer.import_state(self.world.restore_areas[self.rank])
        self.ready = True
        stash, self.stash = self.stash, []
        for msg in stash:
            self._process(msg)

    def _on_data(self, msg):
        self._check_pool()
        if not self.ready:
            self.stash.append(msg)
            return
        self._process(msg)

    def _process(self, msg):
        group, ts, t, fields = decode_data(msg.payload)
        p = msg.source[1]
        event = DataEvent(p, group, ts, t, fields, msg.sent_at)
        self.pipeline.on_data_event(event)
        self.writer.on_raw(p, fields, ts, t)
        self.writer.on_clock(p, group, ts, t, msg.sent_at)
        self.received[p] += 1
        self._check_done(p)

    def _check_done(self, p):
        if p in self.done_counts and self.received[p] == self.done_counts[p] and p not in self.finished:
            self.finished.add(p)
            self.writer.producer_done(p)

    @property
    def all_done(self) -> bool:
        return len(self.finished) == len(self.local_producers)


# the world ---------------------------------------------------------------------


@dataclass
class RunResult:
    files: dict
    overheads: list
    checkpoint: bytes | None
    terminated: bool
    virtual_time: float
    dropped_writes: list
    metrics: dict


class World:
    def __init__(self, config: Config, params: SimParams):
        self.config = config
        self.params = params
        self.graph = build_rule_graph(config)
        P = params.servers * params.producers_per_server
        if P < 1:
            raise ValueError("need at least one producer")
        self.py, self.px = grid_shape(P)
        nz, ny, nx = params.chunk
        self.options = model_options(params)
        self.loop = EventLoop()
        self.transport = Transport(self.loop, params.transport)
        self.store = CollectiveFileStore(params.servers, params.out_dir)
        self.restore_meta = None
        self.restore_areas = None
        if params.restore_from is not None:
            from .checkpoint import read_checkpoint

            self.restore_meta, self.restore_areas = read_checkpoint(params.restore_from,
                                                                    params.servers)
        M = params.producers_per_server
        self.servers = [IOServer(self, r, list(range(r * M, (r + 1) * M)))
                        for r in range(params.servers)]
        raw = sorted(config.raw_fields())
        self.producers = []
        for p in range(P):
            iy, ix = divmod(p, self.px)
            chunk = ChunkRect((0, iy * ny, ix * nx), (nz, ny, nx), p)
            provides = [q for q in raw if q not in set(params.omit_fields.get(p, ()))]
            prod = Producer(self, p, chunk, provides)
            if self.restore_meta is not None:
                prod.start_after = self.restore_meta["timestep"]
            self.producers.append(prod)
        for s in self.servers:
            self.transport.register(s.address, s.on_message)
        for prod in self.producers:
            self.transport.register(prod.address, prod.receive)
        self.checkpoint: bytes | None = None

    def time_source(self) -> Iterator[tuple[int, float]]:
        p = self.params
        if p.model_times is not None:
            return iter(enumerate(p.model_times, start=1))
        return timestep_sequence(p.model_seed, p.dt0, p.dt_min, p.dt_max, p.dt_band)

    def check_restart_time(self, t: float) -> None:
        if t != self.restore_meta["model_time"]:
            raise HandshakeError(
                f"model time at restart timestep {self.restore_meta['timestep']} is {t!r}, "
                f"checkpoint recorded {self.restore_meta['model_time']!r}")

    # termination -----------------------------------------------------------

    def outstanding_uids(self) -> dict[int, list[str]]:
        return {s.rank: s.messaging.outstanding_uids() for s in self.servers
                if s.messaging.outstanding_count()}

    def check_termination(self) -> bool:
        return check_termination(self)

    def run(self) -> RunResult:
        for prod in self.producers:
            prod.start()
        if self.params.checkpoint_at is not None:
            from .checkpoint import capture, quiesce

            def drive():
                return self.loop.now if self.loop.step() else None
            quiesce(self, self.params.checkpoint_at, self.params.quiesce_timeout, drive)
            self.checkpoint = capture(self, self.params.checkpoint_at)
            return self._result(terminated=False, dropped=[])
        self.loop.run(max_events=self.params.max_events)
        dropped = []
        if all(s.all_done for s in self.servers) and all(s.pool.idle for s in self.servers):
            for s in self.servers:
                dropped.extend(s.writer.finish())
        if not check_termination(self):
            raise DeadlockError(
                "simulation went quiet without terminating; outstanding: "
                f"{self.outstanding_uids() or 'none'}, producers done: "
                f"{[s.rank for s in self.servers if s.all_done]}",
                outstanding=sorted({u for us in self.outstanding_uids().values() for u in us}))
        return self._result(terminated=True, dropped=dropped)

    def _result(self, terminated, dropped) -> RunResult:
        records = overhead_report(self)
        violations = [v for s in self.servers for v in s.violations]
        metrics = {
            "virtual_time": self.loop.now,
            "events": self.loop.events_run,
            "messages": self.transport.sent,
            "files": sorted(self.store.files),
            "overhead": records["summary"],
            "held_after_checkpoint": sum(s.writer.held for s in self.servers),
            "context_violations": violations,
        }
        return RunResult(dict(self.store.files), records["records"], self.checkpoint,
                         terminated, self.loop.now, dropped, metrics)


def check_termination(world: World) -> bool:
    """All producers done, every pool idle, and no outstanding active messages."""
    return (all(s.all_done for s in world.servers)
            and all(s.pool.idle for s in world.servers)
            and all(s.messaging.outstanding_count() == 0 for s in world.servers)
            and all(s.writer.idle() for s in world.servers))


def overhead_report(world: World) -> dict:
    records: list[OverheadRecord] = sorted(
        (r for s in world.servers for r in s.writer.overheads),
        key=lambda r: (r.boundary, r.file, r.server))
    values = [r.overhead for r in records]
    summary = {"count": len(values),
               "mean": statistics.fmean(values) if values else None,
               "max": max(values) if values else None}
    return {"records": records, "summary": summary}


def metrics_lines(result: RunResult) -> list[str]:
    """Structured text: one JSON object per overhead record, then a summary."""
    lines = [json.dumps({"record": "overhead", "server": r.server, "file": r.file,
                         "boundary": r.boundary, "trigger_time": r.trigger_time,
                         "completion_time": r.completion_time, "overhead": r.overhead},
                        sort_keys=True) for r in result.overheads]
    lines.append(json.dumps({"record": "summary", **result.metrics}, sort_keys=True))
    return lines


def run(config: Config, params: SimParams) -> RunResult:
    return World(config, params).run()


def handshake(config: Config, chunk: ChunkRect, provides, servers: int = 1) -> dict:
    """Register one producer with one server and return the agreed field shapes."""
    params = SimParams(servers=1, producers_per_server=1, chunk=tuple(chunk.extent),
                       omit_fields={0: [q for q in config.raw_fields() if q not in provides]})
    world = World(config, params)
    prod = world.producers[0]
    prod.step = lambda: None
    prod.start()
    world.loop.run()
    server = world.servers[0]
    if not server.ready:
        raise HandshakeError("handshake did not complete")
    return {q: tuple(s) for q, s in server.sizes[0].items()}
