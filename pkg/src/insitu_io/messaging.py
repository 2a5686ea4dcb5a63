"""Active messaging among IO servers.

Collectives are matched by a string uid rather than by issue order.  A
server registers a transient handle (uid + callback); contributions that
arrive before the local call are parked as pending arrivals and absorbed
when the handle is registered.  Handles disappear as soon as their
collective completes, after which the uid may be reused.

Topologies:

reduce
    flat gather to the root; the root combines contributions in ascending
    rank order, so the result does not depend on arrival order.
broadcast
    the root sends its payload to every other server.
barrier
    every server notifies every other server.

Callbacks run on the server's executor (never on the delivery path) with the
signature ``callback(payload, count, dtype_tag, uid)``.

Wire format of an ACTIVE payload (little-endian)::

    u16 uid length | uid (UTF-8) | u8 kind | u8 op | u32 root | u8 dtype tag
    | u64 element count | raw elements
"""

from __future__ import annotations

import enum
import json
import logging
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ActiveMessagingError, ProtocolError

log = logging.getLogger(__name__)

KINDS = {"reduce": 0, "broadcast": 1, "barrier": 2}
KIND_NAMES = {v: k for k, v in KINDS.items()}
OPS = {None: 0, "sum": 1, "min": 2, "max": 3}
OP_NAMES = {v: k for k, v in OPS.items()}
DTYPE_TAGS = {0: None, 1: "<f8", 2: "<i8", 3: "|u1"}
TAG_OF_DTYPE = {v: k for k, v in DTYPE_TAGS.items() if v}
_HEAD = struct.Struct("<BBIBQ")
_COMBINE = {"sum": np.add, "min": np.minimum, "max": np.maximum}


class MsgType(enum.IntEnum):
    REGISTER = 0
    FIELD_SPEC = 1
    FIELD_SIZES = 2
    DATA = 3
    DONE = 4
    ACTIVE = 5


@dataclass(frozen=True)
class TransportMessage:
    msg_type: MsgType
    source: object
    dest: object
    payload: bytes = b""
    uid: str | None = None
    sent_at: float = 0.0

    def __post_init__(self):
        if self.msg_type == MsgType.ACTIVE and not self.uid:
            raise ProtocolError("ACTIVE messages must carry a uid")


@dataclass(frozen=True)
class ActivePacket:
    uid: str
    kind: str
    op: str | None
    root: int
    dtype_tag: int
    count: int
    data: np.ndarray | None


def encode_active(uid: str, kind: str, op: str | None, root: int, data=None) -> bytes:
    ub = uid.encode("utf-8")
    if not ub or len(ub) > 0xFFFF:
        raise ActiveMessagingError("uid must be 1..65535 bytes")
    if data is None:
        tag, count, raw = 0, 0, b""
    else:
        arr = np.ascontiguousarray(data).ravel()
        k = arr.dtype.kind
        if k == "f":
            dt = "<f8"
        elif k == "b" or (k == "u" and arr.dtype.itemsize == 1):
            dt = "|u1"
        elif k in "iu":
            dt = "<i8"
        else:
            raise ActiveMessagingError(f"unsupported payload dtype {arr.dtype}")
        tag = TAG_OF_DTYPE[dt]
        arr = arr.astype(dt, copy=False)
        count, raw = arr.size, arr.tobytes()
    return struct.pack("<H", len(ub)) + ub + _HEAD.pack(KINDS[kind], OPS[op], root, tag, count) + raw


def decode_active(payload: bytes) -> ActivePacket:
    try:
        (n,) = struct.unpack_from("<H", payload, 0)
        if n == 0:
            raise ProtocolError("empty uid")
        uid = payload[2:2 + n].decode("utf-8")
        if len(payload) < 2 + n + _HEAD.size:
            raise ProtocolError("truncated active header")
        kind, op, root, tag, count = _HEAD.unpack_from(payload, 2 + n)
        if kind not in KIND_NAMES or op not in OP_NAMES or tag not in DTYPE_TAGS:
            raise ProtocolError(f"bad kind/op/dtype ({kind}, {op}, {tag})")
        body = payload[2 + n + _HEAD.size:]
        dt = DTYPE_TAGS[tag]
        if dt is None:
            if count or body:
                raise ProtocolError("untyped payload with data")
            data = None
        else:
            if len(body) != count * np.dtype(dt).itemsize:
                raise ProtocolError(f"payload holds {len(body)} bytes for {count} elements")
            data = np.frombuffer(body, dtype=dt).copy()
    except (struct.error, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed active payload: {exc}") from None
    return ActivePacket(uid, KIND_NAMES[kind], OP_NAMES[op], root, tag, count, data)


# producer <-> server plumbing ------------------------------------------------


def encode_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def decode_json(payload: bytes):
    try:
        return json.loads(payload.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed control payload: {exc}") from None


def encode_data(group: str, timestep: int, model_time: float, fields: dict) -> bytes:
    """DATA payload: u32 header length, JSON header, raw little-endian arrays."""
    entries, raws = [], []
    for name in sorted(fields):
        arr = np.require(np.asarray(fields[name], dtype="<f8"), requirements="C")
        entries.append([name, list(arr.shape)])
        raws.append(arr.tobytes())
    head = encode_json({"group": group, "timestep": int(timestep),
                        "model_time": float(model_time), "fields": entries})
    return struct.pack("<I", len(head)) + head + b"".join(raws)


def decode_data(payload: bytes) -> tuple[str, int, float, dict]:
    try:
        (n,) = struct.unpack_from("<I", payload, 0)
    except struct.error:
        raise ProtocolError("truncated DATA payload") from None
    head = decode_json(payload[4:4 + n])
    pos = 4 + n
    out = {}
    for name, shape in head["fields"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * count
        if end > len(payload):
            raise ProtocolError(f"DATA field {name} truncated")
        out[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos = end
    if pos != len(payload):
        raise ProtocolError("trailing bytes in DATA payload")
    return head["group"], head["timestep"], head["model_time"], out


# the active messaging layer --------------------------------------------------


@dataclass
class ActiveHandle:
    uid: str
    kind: str
    op: str | None
    root: int | None
    callback: Callable | None
    issued_at: float
    contributions: dict = field(default_factory=dict)   # source rank -> ActivePacket


@dataclass
class PendingArrival:
    uid: str
    contributions: dict = field(default_factory=dict)
    arrived_at: float = 0.0


class ActiveMessaging:
    """Per-server active messaging endpoint.

    ``send(dest, payload, uid)`` must deliver ``payload`` to server ``dest``
    and end in :meth:`deliver` there.  ``executor`` runs callbacks.
    ``clock`` supplies logical time for bookkeeping.
    """

    def __init__(self, rank: int, num_servers: int, send: Callable, executor,
                 clock: Callable[[], float] = lambda: 0.0, callback_cost: float = 0.0):
        if not 0 <= rank < num_servers:
            raise ValueError("rank out of range")
        self.rank = rank
        self.num_servers = num_servers
        self._send = send
        self.executor = executor
        self.clock = clock
        self.callback_cost = callback_cost
        self._lock = threading.RLock()
        self.handles: dict[str, ActiveHandle] = {}
        self.pending: dict[str, list[PendingArrival]] = {}
        self.protocol_errors: list[str] = []
        self.completed = 0

    # queries ---------------------------------------------------------------

    def outstanding_count(self) -> int:
        with self._lock:
            return len(self.handles) + sum(len(g) for g in self.pending.values())

    def outstanding_uids(self) -> list[str]:
        with self._lock:
            return sorted(set(self.handles) | {u for u, g in self.pending.items() if g})

    # issue -----------------------------------------------------------------

    def _check_root(self, root):
        if not 0 <= root < self.num_servers:
            raise ActiveMessagingError(f"root {root} out of range")

    def _register(self, uid, kind, op, root, callback) -> ActiveHandle:
        if not uid:
            raise ActiveMessagingError("uid must be nonempty")
        if uid in self.handles:
            raise ActiveMessagingError(f"uid {uid!r} already outstanding on server {self.rank}")
        h = ActiveHandle(uid, kind, op, root, callback, self.clock())
        gens = self.pending.get(uid)
        if gens:
            h.contributions.update(gens.pop(0).contributions)
            if not gens:
                del self.pending[uid]
        self.handles[uid] = h
        return h

    def active_reduce(self, data, op: str, root: int, uid: str, callback=None) -> None:
        if op not in _COMBINE:
            raise ActiveMessagingError(f"unknown reduction operator {op!r}")
        self._check_root(root)
        payload = encode_active(uid, "reduce", op, root, data)
        if root != self.rank:
            with self._lock:
                if uid in self.handles:
                    raise ActiveMessagingError(f"uid {uid!r} already outstanding on server {self.rank}")
            self._send(root, payload, uid)
            return
        with self._lock:
            h = self._register(uid, "reduce", op, root, callback)
            h.contributions[self.rank] = decode_active(payload)
            self._maybe_complete(h)

    def active_broadcast(self, data, root: int, uid: str, callback=None) -> None:
        self._check_root(root)
        with self._lock:
            h = self._register(uid, "broadcast", None, root, callback)
            if root == self.rank:
                if data is None:
                    raise ActiveMessagingError("broadcast root must supply data")
                payload = encode_active(uid, "broadcast", None, root, data)
                h.contributions[self.rank] = decode_active(payload)
        if root == self.rank:
            for dest in range(self.num_servers):
                if dest != self.rank:
                    self._send(dest, payload, uid)
        with self._lock:
            self._maybe_complete(h)

    def active_barrier(self, uid: str, callback=None) -> None:
        payload = encode_active(uid, "barrier", None, 0)
        with self._lock:
            h = self._register(uid, "barrier", None, None, callback)
            h.contributions[self.rank] = decode_active(payload)
        for dest in range(self.num_servers):
            if dest != self.rank:
                self._send(dest, payload, uid)
        with self._lock:
            self._maybe_complete(h)

    # arrival ---------------------------------------------------------------

    def deliver(self, msg: TransportMessage) -> None:
        try:
            pkt = decode_active(msg.payload)
            if msg.uid is not None and msg.uid != pkt.uid:
                raise ProtocolError(f"envelope uid {msg.uid!r} != payload uid {pkt.uid!r}")
            if not 0 <= msg.source < self.num_servers:
                raise ProtocolError(f"unknown source {msg.source!r}")
        except ProtocolError as exc:
            log.error("server %d dropped message from %s: %s", self.rank, msg.source, exc)
            self.protocol_errors.append(str(exc))
            return
        with self._lock:
            h = self.handles.get(pkt.uid)
            if h is not None and msg.source not in h.contributions:
                h.contributions[msg.source] = pkt
                self._maybe_complete(h)
                return
            gens = self.pending.setdefault(pkt.uid, [])
            for gen in gens:
                if msg.source not in gen.contributions:
                    gen.contributions[msg.source] = pkt
                    return
            gens.append(PendingArrival(pkt.uid, {msg.source: pkt}, self.clock()))

    def _maybe_complete(self, h: ActiveHandle) -> None:
        if h.kind == "broadcast":
            done = h.root in h.contributions
        else:
            done = len(h.contributions) >= self.num_servers
        if not done:
            return
        del self.handles[h.uid]
        self.completed += 1
        self.executor.submit(self._complete, h, cost=self.callback_cost)

    def _complete(self, h: ActiveHandle) -> None:
        contribs = [h.contributions[r] for r in sorted(h.contributions)]
        for p in contribs:
            if p.kind != h.kind or p.op != h.op or (h.kind != "barrier" and p.root != h.root):
                raise ActiveMessagingError(
                    f"uid {h.uid!r}: mismatched collective ({p.kind}/{p.op}/root {p.root}) "
                    f"vs ({h.kind}/{h.op}/root {h.root})")
        if h.kind == "reduce":
            counts = {p.count for p in contribs}
            tags = {p.dtype_tag for p in contribs}
            if len(counts) != 1 or len(tags) != 1:
                raise ActiveMessagingError(
                    f"uid {h.uid!r}: element count/type mismatch across servers "
                    f"{[(r, h.contributions[r].count) for r in sorted(h.contributions)]}")
            combine = _COMBINE[h.op]
            acc = contribs[0].data.copy()
            for p in contribs[1:]:
                acc = combine(acc, p.data)
            result, count, tag = acc, contribs[0].count, contribs[0].dtype_tag
        elif h.kind == "broadcast":
            p = h.contributions[h.root]
            result, count, tag = p.data, p.count, p.dtype_tag
        else:
            result, count, tag = None, 0, 0
        if h.callback is not None:
            h.callback(result, count, tag, h.uid)


def active_allreduce(am: ActiveMessaging, data, op: str, uid: str, callback) -> None:
    """Reduce to rank 0, then broadcast the result to every server."""
    bcast = f"{uid}::bcast"
    if am.rank == 0:
        def reduced(result, count, tag, _uid):
            am.active_broadcast(result, 0, bcast, callback)
        am.active_reduce(data, op, 0, f"{uid}::reduce", reduced)
    else:
        am.active_broadcast(None, 0, bcast, callback)
        am.active_reduce(data, op, 0, f"{uid}::reduce")
