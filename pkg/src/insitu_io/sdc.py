"""SDC: a small self-describing container for gridded scientific output.

Layout (all integers little-endian)::

    b"SDC1"                 4-byte magic, the trailing digit is the format version
    u64 header_length
    header                  canonical minified JSON, sorted keys, UTF-8
    zero padding            up to the next multiple of 8
    payload section         variable payloads, each starting on an 8-byte boundary

The header holds global ``attributes``, a ``dimensions`` table (name -> size)
and a ``variables`` list sorted by name.  Every variable entry carries
``name``, ``dtype`` (numpy dtype string), ``dims``, ``attributes`` and the
``offset``/``nbytes`` of its payload relative to the start of the payload
section.  Offsets are 64-bit throughout.

Identical content always serialises to identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import SdcFormatError

MAGIC = b"SDC1"
VERSION = 1
_ALLOWED_DTYPES = {"<f8", "<f4", "<i8", "<i4", "|u1", "|i1"}


def _align8(n: int) -> int:
    return (n + 7) & ~7


def canonical_dtype(dtype) -> str:
    dt = np.dtype(dtype)
    if dt.itemsize > 1:
        dt = dt.newbyteorder("<")
    s = dt.str
    if s not in _ALLOWED_DTYPES:
        raise SdcFormatError(f"unsupported dtype {dtype!r}")
    return s


@dataclass
class SdcVariable:
    name: str
    dtype: str
    dims: tuple[str, ...]
    attributes: dict = field(default_factory=dict)
    data: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, SdcVariable):
            return NotImplemented
        if (self.name, self.dtype, tuple(self.dims), self.attributes) != (
            other.name, other.dtype, tuple(other.dims), other.attributes):
            return False
        if self.data is None or other.data is None:
            return self.data is None and other.data is None
        return (self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes())


@dataclass
class SdcFile:
    attributes: dict = field(default_factory=dict)
    dimensions: dict = field(default_factory=dict)
    variables: dict = field(default_factory=dict)

    def add_dimension(self, name: str, size: int) -> None:
        if size < 0:
            raise SdcFormatError(f"dimension {name} has negative size")
        if name in self.dimensions and self.dimensions[name] != size:
            raise SdcFormatError(
                f"dimension {name} redefined with size {size} (was {self.dimensions[name]})")
        self.dimensions[name] = int(size)

    def add_variable(self, name, data, dims, attributes=None) -> SdcVariable:
        arr = np.require(np.asarray(data), requirements="C")
        dims = tuple(dims)
        if arr.ndim != len(dims):
            raise SdcFormatError(f"variable {name}: {arr.ndim}-d data for dims {dims}")
        for d, n in zip(dims, arr.shape):
            if d not in self.dimensions:
                raise SdcFormatError(f"variable {name}: undefined dimension {d}")
            if self.dimensions[d] != n:
                raise SdcFormatError(
                    f"variable {name}: dimension {d} is {self.dimensions[d]}, data has {n}")
        dt = canonical_dtype(arr.dtype)
        var = SdcVariable(name, dt, dims, dict(attributes or {}), arr.astype(dt, copy=False))
        self.variables[name] = var
        return var

    def shape_of(self, name: str) -> tuple[int, ...]:
        return tuple(self.dimensions[d] for d in self.variables[name].dims)


def _header_dict(sdc: SdcFile):
    variables = []
    offset = 0
    for name in sorted(sdc.variables):
        var = sdc.variables[name]
        shape = sdc.shape_of(name)
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(var.dtype).itemsize
        if var.data is None or var.data.nbytes != nbytes:
            raise SdcFormatError(f"variable {name}: payload does not match declared shape {shape}")
        variables.append({
            "name": name, "dtype": var.dtype, "dims": list(var.dims),
            "attributes": var.attributes, "offset": offset, "nbytes": nbytes,
        })
        offset = _align8(offset + nbytes)
    return {
        "version": VERSION,
        "attributes": sdc.attributes,
        "dimensions": dict(sorted(sdc.dimensions.items())),
        "variables": variables,
    }, offset


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False, ensure_ascii=True).encode("ascii")


def write_sdc(sdc: SdcFile) -> bytes:
    header, payload_len = _header_dict(sdc)
    hbytes = _dumps(header)
    base = _align8(len(MAGIC) + 8 + len(hbytes))
    out = bytearray(base + payload_len)
    out[0:4] = MAGIC
    struct.pack_into("<Q", out, 4, len(hbytes))
    out[12:12 + len(hbytes)] = hbytes
    for entry in header["variables"]:
        data = sdc.variables[entry["name"]].data
        start = base + entry["offset"]
        out[start:start + entry["nbytes"]] = np.ascontiguousarray(data).tobytes()
    return bytes(out)


def read_header(blob: bytes) -> dict:
    if len(blob) < 12 or blob[:4] != MAGIC:
        if blob[:3] == b"SDC":
            raise SdcFormatError(f"unsupported SDC version {blob[3:4]!r}")
        raise SdcFormatError("not an SDC file (bad magic)")
    (hlen,) = struct.unpack_from("<Q", blob, 4)
    if 12 + hlen > len(blob):
        raise SdcFormatError("truncated header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SdcFormatError(f"corrupt header: {exc}") from None
    if header.get("version") != VERSION:
        raise SdcFormatError(f"unsupported SDC version {header.get('version')}")
    header["_payload_base"] = _align8(12 + hlen)
    return header


def read_sdc(blob: bytes) -> SdcFile:
    header = read_header(blob)
    base = header["_payload_base"]
    sdc = SdcFile(attributes=header["attributes"])
    for name, size in header["dimensions"].items():
        sdc.add_dimension(name, size)
    spans = []
    for entry in header["variables"]:
        dims = tuple(entry["dims"])
        dt = np.dtype(entry["dtype"])
        shape = tuple(sdc.dimensions[d] for d in dims)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        start = base + entry["offset"]
        if nbytes != entry["nbytes"] or start + nbytes > len(blob) or entry["offset"] % 8:
            raise SdcFormatError(f"variable {entry['name']}: bad payload extent")
        spans.append((entry["offset"], entry["offset"] + nbytes, entry["name"]))
        data = np.frombuffer(blob, dtype=dt, count=int(np.prod(shape, dtype=np.int64)),
                             offset=start).reshape(shape).copy()
        sdc.variables[entry["name"]] = SdcVariable(
            entry["name"], entry["dtype"], dims, entry["attributes"], data)
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise SdcFormatError(f"payloads of {an} and {bn} overlap")
    return sdc


def _boxes_overlap(s1, c1, s2, c2) -> bool:
    for a, n, b, m in zip(s1, c1, s2, c2):
        if a + n <= b or b + m <= a:
            return False
    return all(n > 0 for n in c1) and all(m > 0 for m in c2)


class SdcWriter:
    """Two-stage writer mirroring a parallel define/write/close cycle.

    Dimensions and variables are declared first; :meth:`enddef` allocates
    zero-filled payloads which are then populated by independent region
    writes at global offsets.  Overlapping region writes are rejected.
    """

    def __init__(self, attributes=None):
        self.file = SdcFile(attributes=dict(attributes or {}))
        self._decl: dict[str, tuple] = {}
        self._written: dict[str, list] = {}
        self._defined = False

    def define_dimension(self, name, size):
        if self._defined:
            raise SdcFormatError("define after enddef")
        self.file.add_dimension(name, size)

    def define_variable(self, name, dtype, dims, attributes=None):
        if self._defined:
            raise SdcFormatError("define after enddef")
        for d in dims:
            if d not in self.file.dimensions:
                raise SdcFormatError(f"variable {name}: undefined dimension {d}")
        self._decl[name] = (canonical_dtype(dtype), tuple(dims), dict(attributes or {}))

    def enddef(self):
        for name, (dt, dims, attrs) in self._decl.items():
            shape = tuple(self.file.dimensions[d] for d in dims)
            self.file.variables[name] = SdcVariable(name, dt, dims, attrs, np.zeros(shape, dtype=dt))
            self._written[name] = []
        self._defined = True

    def write_region(self, name, start, data):
        if not self._defined:
            raise SdcFormatError("write before enddef")
        var = self.file.variables.get(name)
        if var is None:
            raise SdcFormatError(f"write to undefined variable {name}")
        data = np.asarray(data)
        start = tuple(int(s) for s in start)
        count = data.shape
        if len(start) != var.data.ndim or len(count) != var.data.ndim:
            raise SdcFormatError(f"{name}: region rank {len(start)} != variable rank {var.data.ndim}")
        for s, c, n in zip(start, count, var.data.shape):
            if s < 0 or s + c > n:
                raise SdcFormatError(f"{name}: region {start}+{count} outside {var.data.shape}")
        for s2, c2 in self._written[name]:
            if _boxes_overlap(start, count, s2, c2):
                raise SdcFormatError(f"{name}: region {start}+{count} overlaps {s2}+{c2}")
        self._written[name].append((start, count))
        idx = tuple(slice(s, s + c) for s, c in zip(start, count))
        var.data[idx] = data

    def to_bytes(self) -> bytes:
        return write_sdc(self.file)


def summarize(blob: bytes) -> str:
    """Human-readable dump of header and per-variable summaries."""
    sdc = read_sdc(blob)
    lines = [f"SDC version {VERSION}, {len(blob)} bytes"]
    for k in sorted(sdc.attributes):
        lines.append(f"  :{k} = {sdc.attributes[k]!r}")
    lines.append("dimensions:")
    for k, v in sorted(sdc.dimensions.items()):
        lines.append(f"  {k} = {v}")
    lines.append("variables:")
    for name in sorted(sdc.variables):
        var = sdc.variables[name]
        dims = ", ".join(var.dims)
        line = f"  {var.dtype} {name}({dims})"
        if var.data is not None and var.data.size and var.data.dtype.kind in "fi":
            line += f"  min={var.data.min().item()!r} max={var.data.max().item()!r}"
        lines.append(line)
        for k in sorted(var.attributes):
            lines.append(f"    {name}:{k} = {var.attributes[k]!r}")
    return "\n".join(lines)
