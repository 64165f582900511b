"""Byte-level layout of the flat binary format and its failure modes."""

import json
import struct

import numpy as np
import pytest

from nddr.checkpoint import (
    MAGIC,
    VERSION,
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)


def test_byte_layout_oracle(tmp_path):
    # Decode a one-record file by hand, independent of the reader.
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    p = tmp_path / "c.bin"
    save_checkpoint(p, {"w": arr}, step=7, config={"k": 1})
    buf = p.read_bytes()
    assert buf[:4] == b"NDDR"
    pos = 4
    version, = struct.unpack_from("<I", buf, pos); pos += 4
    assert version == 1
    count, = struct.unpack_from("<Q", buf, pos); pos += 8
    assert count == 1
    name_len, = struct.unpack_from("<I", buf, pos); pos += 4
    assert buf[pos:pos + name_len] == b"w"; pos += name_len
    tag, ndim = struct.unpack_from("<BB", buf, pos); pos += 2
    assert tag == 1 and ndim == 2  # float32, 2-d
    dims = struct.unpack_from("<2Q", buf, pos); pos += 16
    assert dims == (2, 3)
    vals = np.frombuffer(buf, dtype="<f4", count=6, offset=pos); pos += 24
    np.testing.assert_array_equal(vals.reshape(2, 3), arr)
    json_len, = struct.unpack_from("<I", buf, pos); pos += 4
    trailer = json.loads(buf[pos:pos + json_len].decode("utf-8")); pos += json_len
    assert trailer == {"step": 7, "config": {"k": 1}}
    assert pos == len(buf)


def test_f64_dtype_tag(tmp_path):
    p = tmp_path / "c.bin"
    save_checkpoint(p, {"x": np.zeros(2, dtype=np.float64)})
    buf = p.read_bytes()
    name_len, = struct.unpack_from("<I", buf, 16)
    tag = buf[16 + 4 + name_len]
    assert tag == 2


def test_round_trip_preserves_bits_and_order(tmp_path):
    rng = np.random.default_rng(0)
    records = {
        "b/second": rng.standard_normal((3, 1, 2)).astype(np.float32),
        "a/first": rng.standard_normal(5),  # float64
        "scalar": np.float64(3.25).reshape(()),
    }
    p = tmp_path / "c.bin"
    save_checkpoint(p, records, step=42, config={"nested": {"deep": [1, 2]}})
    ck = load_checkpoint(p)
    assert list(ck.records) == ["b/second", "a/first", "scalar"]  # insertion order kept
    for name, arr in records.items():
        got = ck.records[name]
        assert got.dtype == np.asarray(arr).dtype
        np.testing.assert_array_equal(got, arr)
    assert ck.step == 42
    assert ck.config == {"nested": {"deep": [1, 2]}}
    assert isinstance(ck, Checkpoint)


def test_save_is_deterministic(tmp_path):
    records = {"w": np.linspace(0, 1, 7, dtype=np.float32)}
    save_checkpoint(tmp_path / "a", records, step=1, config={"x": 2})
    save_checkpoint(tmp_path / "b", records, step=1, config={"x": 2})
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_empty_records(tmp_path):
    p = tmp_path / "c.bin"
    save_checkpoint(p, {})
    ck = load_checkpoint(p)
    assert ck.records == {} and ck.step == 0 and ck.config == {}


def test_trailerless_file_loads(tmp_path):
    # Everything through the records section is a complete file.
    p = tmp_path / "c.bin"
    arr = np.ones(3, dtype=np.float32)
    save_checkpoint(p, {"w": arr}, step=9)
    buf = p.read_bytes()
    assert load_checkpoint(p).step == 9
    (tmp_path / "bare.bin").write_bytes(buf[:_trailer_pos(buf)])
    bare = load_checkpoint(tmp_path / "bare.bin")
    np.testing.assert_array_equal(bare.records["w"], arr)
    assert bare.step == 0 and bare.config == {}


def _trailer_pos(buf: bytes) -> int:
    # records end where the trailer length word begins; recompute by walking
    pos = 4 + 4
    count, = struct.unpack_from("<Q", buf, pos); pos += 8
    for _ in range(count):
        name_len, = struct.unpack_from("<I", buf, pos); pos += 4 + name_len
        tag, ndim = struct.unpack_from("<BB", buf, pos); pos += 2
        dims = struct.unpack_from(f"<{ndim}Q", buf, pos); pos += 8 * ndim
        itemsize = 4 if tag == 1 else 8
        n = 1
        for d in dims:
            n *= d
        pos += n * itemsize
    return pos


def test_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "c.bin", {"w": np.zeros(2, dtype=np.int32)})


def test_bad_magic(tmp_path):
    p = tmp_path / "c.bin"
    save_checkpoint(p, {"w": np.zeros(2, dtype=np.float32)})
    buf = bytearray(p.read_bytes())
    buf[:4] = b"JUNK"
    p.write_bytes(bytes(buf))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(p)
    assert "magic" in str(err.value)


def test_bad_version(tmp_path):
    p = tmp_path / "c.bin"
    save_checkpoint(p, {"w": np.zeros(2, dtype=np.float32)})
    buf = bytearray(p.read_bytes())
    struct.pack_into("<I", buf, 4, 99)
    p.write_bytes(bytes(buf))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(p)
    assert "version 99" in str(err.value)


def test_truncation_anywhere_raises(tmp_path):
    p = tmp_path / "c.bin"
    save_checkpoint(p, {"w": np.arange(4, dtype=np.float32)}, step=3, config={"a": 1})
    buf = p.read_bytes()
    cut_points = [2, 6, 14, 20, len(buf) - 3]
    for cut in cut_points:
        q = tmp_path / f"cut{cut}.bin"
        q.write_bytes(buf[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(q)


def test_unknown_dtype_tag(tmp_path):
    p = tmp_path / "c.bin"
    save_checkpoint(p, {"w": np.zeros(2, dtype=np.float32)})
    buf = bytearray(p.read_bytes())
    name_len, = struct.unpack_from("<I", buf, 16)
    buf[16 + 4 + name_len] = 7
    p.write_bytes(bytes(buf))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(p)
    assert "tag 7" in str(err.value)


def test_corrupt_trailer(tmp_path):
    p = tmp_path / "c.bin"
    save_checkpoint(p, {"w": np.zeros(2, dtype=np.float32)}, step=1, config={"a": 1})
    buf = bytearray(p.read_bytes())
    buf[-3] = 0xFF  # stomp on the JSON text
    p.write_bytes(bytes(buf))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(p)
    assert "trailer" in str(err.value)


def test_duplicate_names_rejected(tmp_path):
    # Hand-build a two-record file reusing one name.
    def record(name: str, arr: np.ndarray) -> bytes:
        nb = name.encode()
        return (struct.pack("<I", len(nb)) + nb + struct.pack("<BB", 1, arr.ndim)
                + struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.astype("<f4").tobytes())

    arr = np.zeros(2, dtype=np.float32)
    body = MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", 2) + record("w", arr) + record("w", arr)
    p = tmp_path / "dup.bin"
    p.write_bytes(body)
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(p)
    assert "duplicate" in str(err.value)


def test_non_utf8_name(tmp_path):
    body = MAGIC + struct.pack("<I", VERSION) + struct.pack("<Q", 1)
    body += struct.pack("<I", 2) + b"\xff\xfe" + struct.pack("<BB", 1, 0)
    body += np.float32(1.0).tobytes()
    p = tmp_path / "bad.bin"
    p.write_bytes(body)
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(p)
    assert "utf-8" in str(err.value)


def test_zero_dim_array_round_trip(tmp_path):
    p = tmp_path / "c.bin"
    save_checkpoint(p, {"s": np.float32(2.5).reshape(())})
    got = load_checkpoint(p).records["s"]
    assert got.shape == () and got == np.float32(2.5)
