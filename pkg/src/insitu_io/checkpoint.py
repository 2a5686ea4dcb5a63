"""Checkpoint and restart of the writer federator.

Only the writer's state is saved; the diagnostics federator is drained
(quiesced) up to the checkpoint timestep first and restarts empty.  The
writer's state is split into five areas:

1. registry: server clock, trigger progress, written files, finished streams
2. time-manipulation buffers
3. ordered intake queues
4. pending file write states
5. stored values not yet written

Each area is a :class:`StateTree` serialised in two phases: a walk that
measures the exact byte size, one allocation, then a walk that packs the
bytes.  The writer's lock epoch must not change between the phases.

Area encoding (little-endian)::

    header   b"CKPT" | u16 version | u16 area id | u64 total length (header included)
    node     u8 tag | u16 name length | name (UTF-8) | body
      tag 0  mapping   u32 child count, children
      tag 8  sequence  u32 child count, children
      tag 1  int       i64
      tag 2  float     f64
      tag 3  str       u32 length, UTF-8 bytes
      tag 4  bytes     u32 length, bytes
      tag 5  none      (no body)
      tag 6  bool      u8
      tag 7  ndarray   u8 dtype code, u8 ndim, u64 per dimension, raw data

The checkpoint file is an SDC container holding ``ckpt.area1`` ..
``ckpt.area5`` (bytes of all ranks back to back), ``ckpt.directory``
(area x rank x (offset, length), 64-bit) and ``ckpt.meta`` (canonical JSON:
version, timestep, model time, server count).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, QuiesceTimeout, SdcFormatError
from .sdc import SdcFile, read_sdc, write_sdc

VERSION = 1
AREAS = ("registry", "buffers", "queues", "file_states", "stored_values")
HEADER = struct.Struct("<4sHHQ")
MAGIC = b"CKPT"

T_MAP, T_INT, T_FLOAT, T_STR, T_BYTES, T_NONE, T_BOOL, T_ARRAY, T_SEQ = range(9)
_DTYPES = {1: "<f8", 2: "<i8", 3: "|u1", 4: "<f4", 5: "<i4"}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}

# the single allocation of phase two goes through this hook (tests count calls)
_alloc = bytearray


@dataclass
class StateTree:
    """A named node: either a branch (``children``) or a leaf (``value``)."""

    name: str
    kind: int
    value: object = None
    children: list | None = None

    @classmethod
    def build(cls, obj, name: str = "") -> "StateTree":
        if isinstance(obj, dict):
            return cls(name, T_MAP, children=[cls.build(v, str(k)) for k, v in obj.items()])
        if isinstance(obj, (list, tuple)):
            return cls(name, T_SEQ, children=[cls.build(v, str(i)) for i, v in enumerate(obj)])
        if obj is None:
            return cls(name, T_NONE)
        if isinstance(obj, (bool, np.bool_)):
            return cls(name, T_BOOL, bool(obj))
        if isinstance(obj, (int, np.integer)):
            return cls(name, T_INT, int(obj))
        if isinstance(obj, (float, np.floating)):
            return cls(name, T_FLOAT, float(obj))
        if isinstance(obj, str):
            return cls(name, T_STR, obj)
        if isinstance(obj, (bytes, bytearray)):
            return cls(name, T_BYTES, bytes(obj))
        if isinstance(obj, np.ndarray):
            code = _DTYPE_CODES.get(obj.dtype.newbyteorder("<").str if obj.dtype.itemsize > 1
                                    else obj.dtype.str)
            if code is None:
                raise CheckpointError(f"{name}: unsupported array dtype {obj.dtype}")
            return cls(name, T_ARRAY, obj)
        raise CheckpointError(f"{name}: cannot checkpoint {type(obj).__name__}")

    def to_python(self):
        if self.kind == T_MAP:
            return {c.name: c.to_python() for c in self.children}
        if self.kind == T_SEQ:
            return [c.to_python() for c in self.children]
        return self.value


def _node_size(node: StateTree) -> int:
    n = 1 + 2 + len(node.name.encode("utf-8"))
    k = node.kind
    if k in (T_MAP, T_SEQ):
        return n + 4 + sum(_node_size(c) for c in node.children)
    if k in (T_INT, T_FLOAT):
        return n + 8
    if k == T_STR:
        return n + 4 + len(node.value.encode("utf-8"))
    if k == T_BYTES:
        return n + 4 + len(node.value)
    if k == T_NONE:
        return n
    if k == T_BOOL:
        return n + 1
    arr = node.value
    return n + 2 + 8 * arr.ndim + arr.size * arr.dtype.itemsize


def measure_state(tree: StateTree) -> int:
    """Phase one: exact size of the serialised area, header included."""
    return HEADER.size + _node_size(tree)


def _pack(node: StateTree, buf, pos: int) -> int:
    name = node.name.encode("utf-8")
    struct.pack_into("<BH", buf, pos, node.kind, len(name))
    pos += 3
    buf[pos:pos + len(name)] = name
    pos += len(name)
    k = node.kind
    if k in (T_MAP, T_SEQ):
        struct.pack_into("<I", buf, pos, len(node.children))
        pos += 4
        for c in node.children:
            pos = _pack(c, buf, pos)
    elif k == T_INT:
        struct.pack_into("<q", buf, pos, node.value)
        pos += 8
    elif k == T_FLOAT:
        struct.pack_into("<d", buf, pos, node.value)
        pos += 8
    elif k in (T_STR, T_BYTES):
        raw = node.value.encode("utf-8") if k == T_STR else node.value
        struct.pack_into("<I", buf, pos, len(raw))
        pos += 4
        buf[pos:pos + len(raw)] = raw
        pos += len(raw)
    elif k == T_BOOL:
        buf[pos] = 1 if node.value else 0
        pos += 1
    elif k == T_ARRAY:
        arr = node.value
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        struct.pack_into("<BB", buf, pos, _DTYPE_CODES[dt.str], arr.ndim)
        pos += 2
        for n in arr.shape:
            struct.pack_into("<Q", buf, pos, n)
            pos += 8
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        buf[pos:pos + len(raw)] = raw
        pos += len(raw)
    return pos


def serialize_state(tree: StateTree, area_id: int = 0, size: int | None = None) -> bytes:
    """Phase two: one allocation of the measured size, then pack in place."""
    if size is None:
        size = measure_state(tree)
    buf = _alloc(size)
    HEADER.pack_into(buf, 0, MAGIC, VERSION, area_id, size)
    end = _pack(tree, buf, HEADER.size)
    if end != size:
        raise CheckpointError(f"area {area_id}: measured {size} bytes, packed {end}")
    return bytes(buf)


def _unpack(buf, pos: int):
    try:
        kind, n = struct.unpack_from("<BH", buf, pos)
        pos += 3
        name = bytes(buf[pos:pos + n]).decode("utf-8")
        pos += n
        if kind in (T_MAP, T_SEQ):
            (count,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            children = []
            for _ in range(count):
                child, pos = _unpack(buf, pos)
                children.append(child)
            return StateTree(name, kind, children=children), pos
        if kind == T_INT:
            return StateTree(name, kind, struct.unpack_from("<q", buf, pos)[0]), pos + 8
        if kind == T_FLOAT:
            return StateTree(name, kind, struct.unpack_from("<d", buf, pos)[0]), pos + 8
        if kind in (T_STR, T_BYTES):
            (m,) = struct.unpack_from("<I", buf, pos)
            raw = bytes(buf[pos + 4:pos + 4 + m])
            if len(raw) != m:
                raise CheckpointError("truncated string")
            return StateTree(name, kind, raw.decode("utf-8") if kind == T_STR else raw), pos + 4 + m
        if kind == T_NONE:
            return StateTree(name, kind), pos
        if kind == T_BOOL:
            return StateTree(name, kind, bool(buf[pos])), pos + 1
        if kind == T_ARRAY:
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            dt = np.dtype(_DTYPES[code])
            count = int(np.prod(shape, dtype=np.int64))
            end = pos + count * dt.itemsize
            if end > len(buf):
                raise CheckpointError("truncated array")
            arr = np.frombuffer(bytes(buf[pos:end]), dtype=dt).reshape(shape).copy()
            return StateTree(name, kind, arr), end
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt state area: {exc}") from None
    raise CheckpointError(f"corrupt state area: unknown tag {kind}")


def deserialize_state(blob: bytes, area_id: int | None = None) -> StateTree:
    if len(blob) < HEADER.size:
        raise CheckpointError("state area shorter than its header")
    magic, version, aid, total = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError("bad state area magic")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if area_id is not None and aid != area_id:
        raise CheckpointError(f"expected area {area_id}, found {aid}")
    if total != len(blob):
        raise CheckpointError(f"area {aid}: header says {total} bytes, have {len(blob)}")
    tree, end = _unpack(blob, HEADER.size)
    if end != total:
        raise CheckpointError(f"area {aid}: {total - end} trailing bytes")
    return tree


class LockedState:
    """The five area trees of one writer, pinned to its lock epoch."""

    def __init__(self, writer):
        self.writer = writer
        self.epoch = writer.epoch
        self.trees = [StateTree.build(a, name) for a, name in zip(writer.export_state(), AREAS)]
        self.sizes: list[int] | None = None

    def _check(self):
        if self.writer.epoch != self.epoch:
            raise CheckpointError(
                f"writer state changed during checkpoint (epoch {self.epoch} -> {self.writer.epoch})")

    def measure(self) -> list[int]:
        self._check()
        self.sizes = [measure_state(t) for t in self.trees]
        return self.sizes

    def serialize(self) -> list[bytes]:
        if self.sizes is None:
            raise CheckpointError("serialize before measure")
        self._check()
        return [serialize_state(t, i + 1, n) for i, (t, n) in enumerate(zip(self.trees, self.sizes))]


def write_checkpoint(rank_areas: list[list[bytes]], meta: dict) -> bytes:
    """Lay every rank's areas out at prefix-sum offsets in one SDC file."""
    n = len(rank_areas)
    if any(len(a) != len(AREAS) for a in rank_areas):
        raise CheckpointError("every rank must supply all five areas")
    directory = np.zeros((len(AREAS), n, 2), dtype="<i8")
    sdc = SdcFile()
    sdc.add_dimension("ckpt.area", len(AREAS))
    sdc.add_dimension("ckpt.rank", n)
    sdc.add_dimension("ckpt.extent", 2)
    for a in range(len(AREAS)):
        offset = 0
        for r in range(n):
            length = len(rank_areas[r][a])
            directory[a, r] = (offset, length)
            offset += length
        data = np.frombuffer(b"".join(rank_areas[r][a] for r in range(n)), dtype="|u1")
        if data.size != offset:
            raise CheckpointError(f"area {a + 1}: size mismatch while laying out ranks")
        dim = f"ckpt.area{a + 1}.bytes"
        sdc.add_dimension(dim, offset)
        sdc.add_variable(f"ckpt.area{a + 1}", data, (dim,), {"area": AREAS[a]})
    sdc.add_variable("ckpt.directory", directory, ("ckpt.area", "ckpt.rank", "ckpt.extent"),
                     {"columns": "offset,length"})
    meta = {"version": VERSION, **meta, "server_count": n}
    raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    sdc.add_dimension("ckpt.meta.bytes", len(raw))
    sdc.add_variable("ckpt.meta", np.frombuffer(raw, dtype="|u1"), ("ckpt.meta.bytes",))
    sdc.attributes = {"title": "writer federator checkpoint", "checkpoint_version": VERSION}
    return write_sdc(sdc)


def _open(blob: bytes):
    try:
        sdc = read_sdc(blob)
    except SdcFormatError as exc:
        raise CheckpointError(f"not a checkpoint: {exc}") from None
    needed = [f"ckpt.area{i + 1}" for i in range(len(AREAS))] + ["ckpt.directory", "ckpt.meta"]
    missing = [v for v in needed if v not in sdc.variables]
    if missing:
        raise CheckpointError(f"checkpoint lacks {missing}")
    meta = json.loads(sdc.variables["ckpt.meta"].data.tobytes().decode())
    if meta.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    directory = sdc.variables["ckpt.directory"].data
    n = meta["server_count"]
    if directory.shape != (len(AREAS), n, 2):
        raise CheckpointError("corrupt directory shape")
    for a in range(len(AREAS)):
        total = sdc.variables[f"ckpt.area{a + 1}"].data.size
        expect = 0
        for r in range(n):
            off, length = (int(x) for x in directory[a, r])
            if off != expect or length < 0 or off + length > total:
                raise CheckpointError(f"corrupt directory entry area {a + 1} rank {r}")
            expect = off + length
        if expect != total:
            raise CheckpointError(f"directory does not cover area {a + 1}")
    return sdc, meta, directory


def restore(blob: bytes, rank: int, server_count: int | None = None) -> list:
    """Rank ``rank``'s five areas as plain Python structures."""
    sdc, meta, directory = _open(blob)
    if server_count is not None and server_count != meta["server_count"]:
        raise CheckpointError(
            f"checkpoint taken with {meta['server_count']} servers, restarting with {server_count}")
    if not 0 <= rank < meta["server_count"]:
        raise CheckpointError(f"rank {rank} not in checkpoint")
    areas = []
    for a in range(len(AREAS)):
        off, length = (int(x) for x in directory[a, rank])
        raw = sdc.variables[f"ckpt.area{a + 1}"].data[off:off + length].tobytes()
        areas.append(deserialize_state(raw, a + 1).to_python())
    return areas


def read_checkpoint(blob: bytes, server_count: int) -> tuple[dict, list]:
    _, meta, _ = _open(blob)
    if meta["server_count"] != server_count:
        raise CheckpointError(
            f"checkpoint taken with {meta['server_count']} servers, restarting with {server_count}")
    return meta, [restore(blob, r) for r in range(server_count)]


# quiescence and capture -------------------------------------------------------


def pipeline_quiet(pipeline, target: int) -> bool:
    """No rule state at or before ``target`` remains in the diagnostics federator."""
    return all(ts > target for ts in pipeline.pending_timesteps())


def server_quiet(server, target: int) -> bool:
    w = server.writer
    if not server.ready or w.plan_counts is None or not w.idle():
        return False
    if not pipeline_quiet(server.pipeline, target):
        return False
    nxt = w.clock._next(w.clock.last_ts)
    if nxt is not None and nxt <= target:
        return False
    return all(q.expected_next > target for q in w.queues.values())


def stuck_report(world, target: int) -> list[str]:
    out = []
    for s in world.servers:
        out.extend(f"server {s.rank}: uid {u}" for u in s.messaging.outstanding_uids())
        out.extend(f"server {s.rank}: rule {r}" for r in s.pipeline.stuck_rules(target))
    return out


def quiesce(world, target: int, timeout: float = float("inf"), drive=None) -> None:
    """Advance ``world`` until every server has drained work up to ``target``.

    ``drive()`` makes progress and returns the current (virtual) time, or
    None when nothing is left to run.
    """
    start = None
    while not all(server_quiet(s, target) for s in world.servers):
        now = drive() if drive is not None else None
        if now is None:
            raise QuiesceTimeout(f"cannot reach quiescence at timestep {target}: no progress possible",
                                 stuck_report(world, target))
        start = now if start is None else start
        if now - start > timeout:
            raise QuiesceTimeout(f"quiescence at timestep {target} timed out",
                                 stuck_report(world, target))


def model_time_at(world, timestep: int) -> float:
    for ts, t in world.time_source():
        if ts == timestep:
            return t
    raise CheckpointError(f"timestep {timestep} not reached by the producer trace")


def capture(world, target: int) -> bytes:
    """Two-phase serialisation of every writer, laid out in one checkpoint file."""
    locked = [LockedState(s.writer) for s in world.servers]
    for ls in locked:
        ls.measure()
    areas = [ls.serialize() for ls in locked]
    blob = write_checkpoint(areas, {"timestep": target, "model_time": model_time_at(world, target)})
    if world.params.out_dir:
        import os

        os.makedirs(world.params.out_dir, exist_ok=True)
        with open(os.path.join(world.params.out_dir, f"checkpoint_{target}.sdc"), "wb") as fh:
            fh.write(blob)
    return blob
