import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gaugelab import formats
from gaugelab.albedo import AlbedoMatrix


@given(M=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                elements=st.floats(allow_nan=True, allow_infinity=True, width=64)))
def test_albedo_round_trip_is_bit_exact(tmp_path_factory, M):
    path = tmp_path_factory.mktemp("albm") / "a.bin"
    formats.write_albedo(path, M, 2, {"note": "x"})
    back, dim, side = formats.read_albedo(path)
    assert dim == 2 and side["rows"] == M.shape[0] and side["note"] == "x"
    assert back.tobytes() == M.tobytes()


def test_albedo_header_layout(tmp_path):
    path = formats.write_albedo(tmp_path / "a.bin", np.arange(6.0).reshape(2, 3), 3)
    raw = path.read_bytes()
    assert raw[:4] == b"ALBM" and len(raw) == 32 + 6 * 8
    assert np.frombuffer(raw[8:20], "<u4").tolist() == [2, 3, 3]
    assert raw[20:32] == bytes(12)


def test_albedo_rejects_bad_files(tmp_path):
    path = formats.write_albedo(tmp_path / "a.bin", np.ones((2, 2)), 2)
    raw = path.read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(formats.FormatError, match="magic"):
        formats.read_albedo(bad)
    bad.write_bytes(raw[:-3])
    with pytest.raises(formats.FormatError):
        formats.read_albedo(bad)
    bad.write_bytes(raw[:10])
    with pytest.raises(formats.FormatError, match="truncated"):
        formats.read_albedo(bad)
    with pytest.raises(formats.FormatError):
        formats.write_albedo(tmp_path / "c.bin", np.ones(3), 2)


@given(V=arrays(np.float64, st.lists(st.integers(1, 4), min_size=1, max_size=3).map(tuple),
                elements=st.floats(allow_nan=True, allow_infinity=True, width=64)))
def test_field_round_trip_is_bit_exact(tmp_path_factory, V):
    path = tmp_path_factory.mktemp("gfld") / "f.bin"
    formats.write_field(path, V)
    back, side = formats.read_field(path)
    assert back.shape == V.shape and side["shape"] == list(V.shape)
    assert back.tobytes() == V.tobytes()


def test_saved_albedo_matrix_sidecar(tmp_path, grids16):
    gin, gout = grids16
    A = AlbedoMatrix(np.random.default_rng(0).random((gout.size, gin.size)), gin, gout,
                     {"n": np.int64(16)})
    path = formats.save_albedo_matrix(tmp_path / "A.bin", A)
    side = json.loads(formats.sidecar_path(path).read_text())
    assert side["format"] == "ALBM" and side["meta"] == {"n": 16}
    assert "grid_in" in side and "grid_out" in side
    back, dim, _ = formats.read_albedo(path)
    assert dim == 2 and back.tobytes() == A.values.tobytes()
