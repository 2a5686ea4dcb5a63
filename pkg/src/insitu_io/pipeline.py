"""The diagnostics federator.

Raw data arrive as :class:`DataEvent` objects, one per producer, timestep and
data definition.  For each diagnostic fed by the event a :class:`RuleState`
keyed by (diagnostic, timestep) collects bindings; whenever a rule's inputs
are bound it is dispatched to the server's executor.

Values live in one of three placements:

``source``
    one value per local producer (raw fields and operators over them).
``all``
    the same value on every server (the result of a broadcast).
``root(r)``
    only on server ``r`` (the result of a reduction rooted at ``r``).

A ``reduction`` first combines the local producers' contributions in
ascending producer rank, then combines servers in ascending rank at the root
through :mod:`insitu_io.messaging`.  Together with the index-ordered
``localreduce`` this makes every diagnostic bitwise independent of message
arrival order.  Operators over ``root(r)`` values run only on server ``r``;
other servers drop their state as soon as their contribution is sent.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import Config
from .errors import ConfigError, PipelineError
from .messaging import ActiveMessaging
from .operators import OPERATORS, IoContext, eval_arithmetic, exec_localreduce
from .rulegraph import SOURCE, RuleGraph, RuleNode, build_rule_graph
from .sim import ZERO_COST, CostModel

log = logging.getLogger(__name__)

ALL = "all"

__all__ = [
    "DataEvent", "RuleState", "ReadyRule", "ready_rules", "choose_root", "placements",
    "DiagnosticsFederator", "exec_localreduce", "eval_arithmetic",
]


def choose_root(rule_key: str, num_servers: int) -> int:
    """FNV-1a (64-bit) of ``rule_key`` modulo ``num_servers``."""
    if num_servers < 1:
        raise ValueError("num_servers must be positive")
    h = 0xCBF29CE484222325
    for b in rule_key.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h % num_servers


@dataclass
class DataEvent:
    source: int
    group: str
    timestep: int
    model_time: float
    fields: dict
    sent_at: float = 0.0


@dataclass
class RuleState:
    diagnostic: str
    timestep: int
    model_time: float
    expected_sources: tuple[int, ...] = ()
    bindings: dict = field(default_factory=dict)          # symbol -> value
    source_bindings: dict = field(default_factory=dict)   # symbol -> {source: value}
    completed: set = field(default_factory=set)           # (node key, source or None)
    running: set = field(default_factory=set)

    def bind(self, symbol: str, value, source: int | None = None) -> None:
        if source is None:
            self.bindings[symbol] = value
        else:
            self.source_bindings.setdefault(symbol, {})[source] = value

    def bound(self, symbol: str, source: int | None = None) -> bool:
        if source is None:
            return symbol in self.bindings
        return source in self.source_bindings.get(symbol, {})

    def all_sources_bound(self, symbol: str) -> bool:
        have = self.source_bindings.get(symbol, {})
        return bool(self.expected_sources) and all(s in have for s in self.expected_sources)


@dataclass(frozen=True)
class ReadyRule:
    node: RuleNode
    source: int | None

    @property
    def key(self) -> str:
        return self.node.key


def ready_rules(state: RuleState, graph: RuleGraph, local=None) -> list[ReadyRule]:
    """Rules of ``state.diagnostic`` not yet run or running whose inputs are bound.

    Per-producer rules are reported once per expected source.  A reduction
    over per-producer values is ready once every expected source is bound.
    ``local`` restricts the answer to node keys that run on this server.
    """
    out = []
    for key in graph.diagnostics[state.diagnostic]:
        if local is not None and key not in local:
            continue
        node = graph.nodes[key]
        symbols = [s for _, s in node.inputs]
        if graph.input_scope[key] == SOURCE:
            if node.kind == "communication":
                tag = (key, None)
                if tag not in state.completed and tag not in state.running and all(
                        state.all_sources_bound(s) for s in symbols):
                    out.append(ReadyRule(node, None))
                continue
            for src in state.expected_sources:
                tag = (key, src)
                if tag in state.completed or tag in state.running:
                    continue
                if all(state.bound(s, src) for s in symbols):
                    out.append(ReadyRule(node, src))
        else:
            tag = (key, None)
            if tag in state.completed or tag in state.running:
                continue
            if all(state.bound(s) for s in symbols):
                out.append(ReadyRule(node, None))
    return out


def _root_of(node: RuleNode, num_servers: int) -> int:
    root = node.args.get("root", "auto")
    if root == "auto":
        return choose_root(node.diagnostic, num_servers)
    r = int(root)
    if r >= num_servers:
        raise PipelineError(f"{node.key}: root {r} but only {num_servers} servers")
    return r


def placements(graph: RuleGraph, raw_fields, num_servers: int) -> tuple[dict, dict]:
    """Static placement of every symbol and the root of every communication."""
    place = {q: SOURCE for q in raw_fields}
    roots = {}
    for key, node in graph.nodes.items():
        ins = {place[s] for _, s in node.inputs}
        if node.kind == "communication":
            r = _root_of(node, num_servers)
            roots[key] = r
            (pin,) = ins if len(ins) == 1 else (None,)
            if node.name == "reduction":
                if pin not in (SOURCE, ALL):
                    raise PipelineError(f"{key}: reduction input is only present on one server")
                place[key] = ("root", r)
            else:
                if pin not in (ALL, ("root", r)):
                    raise PipelineError(f"{key}: broadcast input must be on the root server {r}")
                place[key] = ALL
        elif ins == {SOURCE}:
            place[key] = SOURCE
        else:
            rooted = {p for p in ins if p != ALL}
            if len(rooted) > 1:
                raise PipelineError(f"{key}: inputs live on different root servers {sorted(rooted)}")
            place[key] = rooted.pop() if rooted else ALL
    return place, roots


class DiagnosticsFederator:
    """Per-server scheduler of diagnostics rules.

    ``emit(diagnostic, timestep, model_time, value)`` receives every final
    value present on this server.  ``messaging`` is this server's
    :class:`ActiveMessaging` endpoint and ``executor`` its worker pool.
    """

    def __init__(self, config: Config, rank: int, num_servers: int, executor,
                 messaging: ActiveMessaging | None, emit: Callable,
                 options: dict | None = None, graph: RuleGraph | None = None,
                 costs: CostModel = ZERO_COST, trace: bool = False):
        self.config = config
        self.graph = graph or build_rule_graph(config)
        self.rank = rank
        self.num_servers = num_servers
        self.executor = executor
        self.messaging = messaging
        self.emit = emit
        self.costs = costs
        raw = config.raw_fields()
        self.place, self.roots = placements(self.graph, raw, num_servers)
        for q, final in self.graph.finals.items():
            if self.place[final] == SOURCE:
                raise ConfigError(f"diagnostic {q} never combines its per-producer values")
        dims = {}
        for f in raw.values():
            dims[f.name] = f.dims
            dims[f.qname] = f.dims
        self.ctx = IoContext(dict(options or {}), dims, rank, num_servers)
        self.local = {k for k in self.graph.nodes if self._runs_here(k)}
        self.uids = self._uid_bases()
        self.dependents: dict[str, list[tuple[str, str]]] = {}
        for key, node in self.graph.nodes.items():
            for _, s in node.inputs:
                if s in self.graph.nodes and self.graph.nodes[s].diagnostic != node.diagnostic:
                    self.dependents.setdefault(s, []).append((node.diagnostic, s))
        self.sources: dict[str, tuple[int, ...]] = {}
        self.states: dict[tuple[str, int], RuleState] = {}
        self._lock = threading.RLock()
        self.trace: list | None = [] if trace else None
        self.rules_run = 0
        self.forwarded = 0

    # static helpers -----------------------------------------------------

    def _runs_here(self, key) -> bool:
        node = self.graph.nodes[key]
        if node.kind == "communication":
            return True
        p = self.place[key]
        return p in (SOURCE, ALL) or p == ("root", self.rank)

    def _uid_bases(self) -> dict[str, str]:
        comm = [n for n in self.graph.nodes.values() if n.kind == "communication"]
        names = [n.inputs[0][0] for n in comm]
        return {n.key: (ident if names.count(ident) == 1 else f"{n.diagnostic}::{ident}")
                for n, ident in zip(comm, names)}

    def uid(self, key: str, timestep: int) -> str:
        return f"{self.uids[key]}_{timestep}"

    def set_sources(self, providers: dict[int, set]) -> None:
        """Record which local producers supply which raw fields (from the handshake)."""
        self.sources = {}
        for diag, fields in self.graph.raw_inputs.items():
            srcs = tuple(sorted(s for s, have in providers.items() if set(fields) <= set(have)))
            if not srcs:
                raise PipelineError(
                    f"server {self.rank}: no local producer supplies {list(fields)} for {diag}")
            self.sources[diag] = srcs

    # intake -------------------------------------------------------------

    def on_data_event(self, event: DataEvent) -> None:
        if not any(d.qname == event.group for d in self.config.data_definitions):
            raise PipelineError(f"data event for unknown group {event.group!r}")
        diags = self.graph.diagnostics_of_group(event.group)
        with self._lock:
            for diag in diags:
                if event.source not in self.sources.get(diag, ()):
                    continue
                state = self._state(diag, event.timestep, event.model_time)
                for key in self.graph.diagnostics[diag]:
                    for _, sym in self.graph.nodes[key].inputs:
                        if sym in self.graph.raw_inputs[diag] and not state.bound(sym, event.source):
                            if sym not in event.fields:
                                raise PipelineError(
                                    f"event from {event.source} at ts {event.timestep} lacks {sym}")
                            value = event.fields[sym]
                            if not isinstance(value, (np.ndarray, np.number, float, int)):
                                raise PipelineError(f"{sym}: payload type {type(value).__name__}")
                            state.bind(sym, value, event.source)
                self._schedule(state)

    def _state(self, diag: str, ts: int, model_time: float) -> RuleState:
        st = self.states.get((diag, ts))
        if st is None:
            st = RuleState(diag, ts, model_time, self.sources.get(diag, ()))
            self.states[(diag, ts)] = st
            for key in self.graph.diagnostics[diag]:
                node = self.graph.nodes[key]
                if node.name == "broadcast" and self.roots[key] != self.rank:
                    st.running.add((key, None))
                    self.messaging.active_broadcast(
                        None, self.roots[key], self.uid(key, ts),
                        self._comm_done(diag, ts, key, None))
        return st

    # execution ----------------------------------------------------------

    def _schedule(self, state: RuleState) -> None:
        for rr in ready_rules(state, self.graph, self.local):
            tag = (rr.key, rr.source)
            state.running.add(tag)
            if self.trace is not None:
                self.trace.append(("dispatch", rr.key, rr.source, state.timestep))
            if rr.node.kind == "communication":
                self.executor.submit(self._run_comm, state, rr, cost=self.costs.rule)
            else:
                self.executor.submit(self._run_operator, state, rr, cost=self.costs.rule)
        self._maybe_finish(state)

    def _inputs(self, state, rr):
        if rr.source is None:
            return {ident: state.bindings[s] for ident, s in rr.node.inputs}
        return {ident: state.source_bindings[s][rr.source] for ident, s in rr.node.inputs}

    def _run_operator(self, state: RuleState, rr: ReadyRule) -> None:
        with self._lock:
            inputs = self._inputs(state, rr)
        value = OPERATORS[rr.node.name].execute(rr.node.args, self.ctx, rr.source, inputs)
        with self._lock:
            self.rules_run += 1
            if self.trace is not None:
                self.trace.append(("done", rr.key, rr.source, state.timestep))
            self._complete(state, rr.key, rr.source, value)

    def _run_comm(self, state: RuleState, rr: ReadyRule) -> None:
        node = rr.node
        ((ident, sym),) = node.inputs
        root = self.roots[node.key]
        uid = self.uid(node.key, state.timestep)
        with self._lock:
            if self.graph.input_scope[node.key] == SOURCE:
                contribs = state.source_bindings[sym]
                ordered = [np.asarray(contribs[s]) for s in state.expected_sources]
                combine = {"sum": np.add, "min": np.minimum, "max": np.maximum}[node.args["operator"]]
                local = ordered[0]
                for v in ordered[1:]:
                    local = combine(local, v)
            else:
                local = np.asarray(state.bindings[sym])
            self.rules_run += 1
        shape = np.shape(local)
        if node.name == "reduction":
            if root == self.rank:
                self.messaging.active_reduce(local, node.args["operator"], root, uid,
                                             self._comm_done(state.diagnostic, state.timestep,
                                                             node.key, shape))
            else:
                self.messaging.active_reduce(local, node.args["operator"], root, uid)
                with self._lock:
                    state.running.discard((node.key, None))
                    state.completed.add((node.key, None))
                    if self.trace is not None:
                        self.trace.append(("contributed", node.key, None, state.timestep))
                    self._maybe_finish(state)
        else:
            self.messaging.active_broadcast(
                local, root, uid, self._comm_done(state.diagnostic, state.timestep, node.key, shape))

    def _comm_done(self, diag, ts, key, shape):
        def callback(payload, count, dtype_tag, uid):
            value = np.asarray(payload)
            value = value.reshape(shape) if shape is not None and value.size == int(
                np.prod(shape, dtype=np.int64)) else value
            if value.ndim == 0:
                value = value[()]
            with self._lock:
                state = self.states[(diag, ts)]
                if self.trace is not None:
                    self.trace.append(("done", key, None, ts))
                self._complete(state, key, None, value)
        return callback

    def _complete(self, state: RuleState, key: str, source, value) -> None:
        state.running.discard((key, source))
        state.completed.add((key, source))
        state.bind(key, value, source)
        diag = state.diagnostic
        if key == self.graph.finals[diag]:
            self.forwarded += 1
            self.executor.submit(self.emit, diag, state.timestep, state.model_time, value,
                                 cost=self.costs.writer_intake)
            for dep_diag, sym in self.dependents.get(key, ()):
                if dep_diag in self.sources:
                    dep = self._state(dep_diag, state.timestep, state.model_time)
                    dep.bind(sym, value)
                    self._schedule(dep)
        self._schedule(state)

    def _maybe_finish(self, state: RuleState) -> None:
        if state.running:
            return
        for key in self.local:
            if self.graph.nodes[key].diagnostic != state.diagnostic:
                continue
            if self.graph.input_scope[key] == SOURCE and self.graph.nodes[key].kind != "communication":
                if any((key, s) not in state.completed for s in state.expected_sources):
                    return
            elif (key, None) not in state.completed:
                return
        self.states.pop((state.diagnostic, state.timestep), None)

    # queries ------------------------------------------------------------

    def pending_timesteps(self) -> list[int]:
        with self._lock:
            return sorted({ts for _, ts in self.states})

    def stuck_rules(self, upto: int | None = None) -> list[str]:
        with self._lock:
            out = []
            for (diag, ts), st in sorted(self.states.items()):
                if upto is not None and ts > upto:
                    continue
                for key in self.graph.diagnostics[diag]:
                    if key in self.local and (key, None) not in st.completed and \
                            not any(k == key for k, _ in st.completed):
                        out.append(f"{key}@{ts}")
            return out
