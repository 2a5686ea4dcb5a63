import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from insitu_io.errors import SdcFormatError
from insitu_io.sdc import SdcFile, SdcWriter, read_header, read_sdc, summarize, write_sdc


def small_file():
    f = SdcFile(attributes={"title": "t", "n": 3})
    f.add_dimension("time", 2)
    f.add_dimension("x", 3)
    f.add_variable("a", np.arange(6.0).reshape(2, 3), ("time", "x"), {"units": "m"})
    f.add_variable("b", np.array([1, 2], dtype="<i4"), ("time",))
    f.add_variable("c", np.array([7], dtype="|u1").reshape(()), ())
    return f


def test_layout_by_hand():
    blob = write_sdc(small_file())
    assert blob[:4] == b"SDC1"
    (hlen,) = struct.unpack_from("<Q", blob, 4)
    header = json.loads(blob[12:12 + hlen])
    assert [v["name"] for v in header["variables"]] == ["a", "b", "c"]
    base = (12 + hlen + 7) // 8 * 8
    a, b, c = header["variables"]
    assert (a["offset"], a["nbytes"], b["offset"], b["nbytes"], c["offset"]) == (0, 48, 48, 8, 56)
    assert np.frombuffer(blob, "<f8", 6, base).tolist() == [0, 1, 2, 3, 4, 5]
    assert np.frombuffer(blob, "<i4", 2, base + 48).tolist() == [1, 2]
    assert blob[base + 56] == 7
    assert len(blob) == base + 64


def test_roundtrip_and_determinism():
    f = small_file()
    blob = write_sdc(f)
    g = read_sdc(blob)
    assert g == f
    assert write_sdc(g) == blob


def test_big_endian_input_canonicalised():
    w = SdcWriter()
    w.define_dimension("x", 3)
    w.define_variable("v", ">f8", ("x",))
    w.enddef()
    w.write_region("v", (0,), np.array([1.0, 2.0, 3.0], dtype=">f8"))
    f = read_sdc(w.to_bytes())
    assert f.variables["v"].dtype == "<f8"
    assert f.variables["v"].data.tolist() == [1.0, 2.0, 3.0]


def test_writer_regions():
    w = SdcWriter({"k": 1})
    w.define_dimension("y", 4)
    w.define_dimension("x", 4)
    w.define_variable("v", "<f8", ("y", "x"))
    with pytest.raises(SdcFormatError):
        w.write_region("v", (0, 0), np.ones((2, 2)))
    w.enddef()
    w.write_region("v", (0, 0), np.ones((2, 4)))
    w.write_region("v", (2, 2), np.full((2, 2), 2.0))
    with pytest.raises(SdcFormatError):
        w.write_region("v", (1, 1), np.ones((2, 2)))
    with pytest.raises(SdcFormatError):
        w.write_region("v", (3, 3), np.ones((2, 2)))
    with pytest.raises(SdcFormatError):
        w.write_region("nope", (0, 0), np.ones((1, 1)))
    with pytest.raises(SdcFormatError):
        w.define_dimension("z", 1)
    data = read_sdc(w.to_bytes()).variables["v"].data
    assert data[0].tolist() == [1, 1, 1, 1] and data[3].tolist() == [0, 0, 2, 2]


def test_rejects():
    blob = write_sdc(small_file())
    with pytest.raises(SdcFormatError, match="magic"):
        read_sdc(b"XXXX" + blob[4:])
    with pytest.raises(SdcFormatError, match="version"):
        read_sdc(b"SDC2" + blob[4:])
    with pytest.raises(SdcFormatError):
        read_sdc(blob[:-8])
    with pytest.raises(SdcFormatError):
        read_sdc(blob[:20])
    f = SdcFile()
    f.add_dimension("x", 2)
    with pytest.raises(SdcFormatError):
        f.add_dimension("x", 3)
    with pytest.raises(SdcFormatError):
        f.add_variable("v", np.zeros(2, dtype=np.complex128), ("x",))


def test_overlapping_payloads_rejected():
    blob = bytearray(write_sdc(small_file()))
    (hlen,) = struct.unpack_from("<Q", blob, 4)
    header = json.loads(blob[12:12 + hlen])
    header["variables"][1]["offset"] = 40
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    assert len(text) == hlen
    blob[12:12 + hlen] = text
    with pytest.raises(SdcFormatError):
        read_sdc(bytes(blob))


def test_summarize():
    text = summarize(write_sdc(small_file()))
    assert "<f8 a(time, x)" in text and "a:units = 'm'" in text and "x = 3" in text


def test_read_header_payload_base():
    blob = write_sdc(small_file())
    assert read_header(blob)["_payload_base"] % 8 == 0


arrays = hnp.arrays(st.sampled_from(["<f8", "<i8", "<f4", "<i4", "|u1"]),
                    hnp.array_shapes(min_dims=0, max_dims=3, max_side=4))


@settings(max_examples=200, deadline=None)
@given(st.lists(arrays, min_size=0, max_size=5),
       st.dictionaries(st.text(min_size=1, max_size=5), st.integers() | st.text(max_size=8),
                       max_size=3))
def test_roundtrip_property(datas, attrs):
    f = SdcFile(attributes=attrs)
    for i, a in enumerate(datas):
        dims = tuple(f"v{i}_d{k}" for k in range(a.ndim))
        for d, n in zip(dims, a.shape):
            f.add_dimension(d, n)
        f.add_variable(f"v{i}", a, dims)
    blob = write_sdc(f)
    g = read_sdc(blob)
    assert g == f
    assert write_sdc(g) == blob
