"""Deterministic discrete-event substrate: virtual clock, worker pools, transport.

Everything in a simulated world runs on one :class:`EventLoop`.  Work items
are ``(time, seq, fn)`` entries; ``seq`` breaks ties so a run is a pure
function of its inputs and seeds.

* :class:`SimPool` models a server's thread pool: ``size`` workers, FIFO
  queue, each task occupying a worker for ``cost`` virtual seconds.  The task
  body runs when the task completes.
* :class:`Transport` delivers messages after a seeded random delay.  The
  delivery handler runs in the ``"transport"`` context and is expected to
  hand work to a pool rather than do it inline.

The same ``submit(fn, *args, cost=...)`` executor protocol is implemented by
:class:`InlineExecutor`, :class:`DeferredExecutor` (test helpers) and
:class:`ThreadedExecutor` (real threads).
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import Callable

log = logging.getLogger(__name__)

_ctx = threading.local()


def current_context() -> str | None:
    """Execution-context tag of the running code ("pool", "transport" or None)."""
    return getattr(_ctx, "tag", None)


@contextmanager
def tagged(tag: str):
    prev = current_context()
    _ctx.tag = tag
    try:
        yield
    finally:
        _ctx.tag = prev


class EventLoop:
    def __init__(self):
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self.events_run = 0

    def at(self, time: float, fn: Callable, *args) -> None:
        if time < self.now:
            raise ValueError(f"cannot schedule in the past ({time} < {self.now})")
        heapq.heappush(self._heap, (time, next(self._seq), fn, args))

    def schedule(self, delay: float, fn: Callable, *args) -> None:
        self.at(self.now + delay, fn, *args)

    def pending(self) -> int:
        return len(self._heap)

    def peek_time(self) -> float | None:
        return self._heap[0][0] if self._heap else None

    def step(self) -> bool:
        if not self._heap:
            return False
        time, _, fn, args = heapq.heappop(self._heap)
        self.now = time
        self.events_run += 1
        fn(*args)
        return True

    def run(self, until: float | None = None, max_events: int | None = None,
            stop: Callable[[], bool] | None = None) -> float:
        n = 0
        while self._heap:
            if until is not None and self._heap[0][0] > until:
                break
            if max_events is not None and n >= max_events:
                break
            if stop is not None and stop():
                break
            self.step()
            n += 1
        return self.now


class SimPool:
    """A fixed number of virtual workers consuming a FIFO task queue."""

    def __init__(self, loop: EventLoop, size: int = 16, name: str = "pool"):
        if size < 1:
            raise ValueError("pool size must be >= 1")
        self.loop = loop
        self.size = size
        self.name = name
        self.busy = 0
        self.queue: deque = deque()
        self.tasks_run = 0
        self.busy_time = 0.0

    @property
    def idle(self) -> bool:
        return self.busy == 0 and not self.queue

    def submit(self, fn: Callable, *args, cost: float = 0.0) -> None:
        self.queue.append((fn, args, float(cost)))
        self._dispatch()

    def _dispatch(self):
        while self.busy < self.size and self.queue:
            fn, args, cost = self.queue.popleft()
            self.busy += 1
            self.busy_time += cost
            self.loop.schedule(cost, self._finish, fn, args)

    def _finish(self, fn, args):
        try:
            with tagged("pool"):
                fn(*args)
        finally:
            self.busy -= 1
            self.tasks_run += 1
            self._dispatch()


class InlineExecutor:
    """Runs every task immediately on the caller's stack."""

    idle = True

    def submit(self, fn, *args, cost: float = 0.0):
        with tagged("pool"):
            fn(*args)


class DeferredExecutor:
    """Queues tasks until :meth:`run_all`; lets tests choose the order."""

    def __init__(self):
        self.queue: deque = deque()

    @property
    def idle(self) -> bool:
        return not self.queue

    def submit(self, fn, *args, cost: float = 0.0):
        self.queue.append((fn, args))

    def run_one(self, index: int = 0):
        self.queue.rotate(-index)
        fn, args = self.queue.popleft()
        self.queue.rotate(index)
        with tagged("pool"):
            fn(*args)

    def run_all(self, rng: random.Random | None = None):
        while self.queue:
            self.run_one(rng.randrange(len(self.queue)) if rng else 0)


class ThreadedExecutor:
    """Real worker threads; ``cost`` is ignored."""

    def __init__(self, size: int = 16):
        self._pool = ThreadPoolExecutor(max_workers=size)
        self._lock = threading.Lock()
        self._inflight = 0
        self._idle = threading.Event()
        self._idle.set()
        self.errors: list[BaseException] = []

    @property
    def idle(self) -> bool:
        return self._idle.is_set()

    def submit(self, fn, *args, cost: float = 0.0):
        with self._lock:
            self._inflight += 1
            self._idle.clear()
        self._pool.submit(self._run, fn, args)

    def _run(self, fn, args):
        try:
            with tagged("pool"):
                fn(*args)
        except BaseException as exc:  # surfaced by wait()
            log.exception("pool task failed")
            self.errors.append(exc)
        finally:
            with self._lock:
                self._inflight -= 1
                if self._inflight == 0:
                    self._idle.set()

    def wait(self, timeout: float | None = None) -> bool:
        done = self._idle.wait(timeout)
        if self.errors:
            raise self.errors[0]
        return done

    def shutdown(self):
        self._pool.shutdown(wait=True)


@dataclass(frozen=True)
class TransportConfig:
    """Seeded network behaviour.

    Each message is delayed by ``uniform(delay_min, delay_max)`` plus
    ``uniform(0, reorder_window)``.  With ``fifo`` set, messages on one
    (source, destination) channel never overtake each other.  Messages
    accepted by ``drop_filter`` (all, when it is None) are lost with
    ``drop_probability``; this exists for fault injection only.
    """

    seed: int = 0
    delay_min: float = 1e-4
    delay_max: float = 1e-3
    reorder_window: float = 0.0
    drop_probability: float = 0.0
    drop_filter: Callable | None = None
    fifo: bool = False

    def __post_init__(self):
        if not 0 <= self.delay_min <= self.delay_max:
            raise ValueError("need 0 <= delay_min <= delay_max")
        if self.reorder_window < 0:
            raise ValueError("reorder_window must be >= 0")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must be in [0, 1]")


class Transport:
    """Point-to-point delivery between registered endpoints."""

    def __init__(self, loop: EventLoop, config: TransportConfig | None = None):
        self.loop = loop
        self.config = config or TransportConfig()
        self.rng = random.Random(self.config.seed)
        self.endpoints: dict = {}
        self._channel_time: dict = {}
        self.sent = 0
        self.delivered = 0
        self.dropped: list = []

    def register(self, address, handler: Callable) -> None:
        if address in self.endpoints:
            raise ValueError(f"endpoint {address!r} registered twice")
        self.endpoints[address] = handler

    def send(self, msg) -> None:
        if msg.dest not in self.endpoints:
            raise ValueError(f"no endpoint {msg.dest!r}")
        cfg = self.config
        msg = replace(msg, sent_at=self.loop.now)
        delay = self.rng.uniform(cfg.delay_min, cfg.delay_max)
        if cfg.reorder_window:
            delay += self.rng.uniform(0.0, cfg.reorder_window)
        lost = self.rng.random() < cfg.drop_probability
        self.sent += 1
        if lost and (cfg.drop_filter is None or cfg.drop_filter(msg)):
            log.debug("dropping %s %s->%s", msg.msg_type, msg.source, msg.dest)
            self.dropped.append(msg)
            return
        when = self.loop.now + delay
        if cfg.fifo:
            chan = (msg.source, msg.dest)
            when = max(when, self._channel_time.get(chan, 0.0))
            self._channel_time[chan] = when
        self.loop.at(when, self._deliver, msg)

    def _deliver(self, msg):
        self.delivered += 1
        with tagged("transport"):
            self.endpoints[msg.dest](msg)


@dataclass(frozen=True)
class CostModel:
    """Virtual-time cost of each kind of server work, in seconds."""

    data_base: float = 2e-4
    data_per_element: float = 2e-8
    rule: float = 5e-5
    callback: float = 2e-5
    writer_intake: float = 3e-5
    file_define: float = 2e-3
    file_write_base: float = 5e-4
    file_write_per_element: float = 1e-8
    file_close: float = 1e-3

    def data(self, elements: int) -> float:
        return self.data_base + self.data_per_element * elements

    def write(self, elements: int) -> float:
        return self.file_write_base + self.file_write_per_element * elements


ZERO_COST = CostModel(0, 0, 0, 0, 0, 0, 0, 0, 0)
