import io
import struct

import numpy as np
import pytest

from refrpca import urpc
from refrpca.errors import FormatError


def test_tensor_bytes_layout():
    buf = io.BytesIO()
    urpc.write_tensor(buf, np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    raw = buf.getvalue()
    assert raw[:4] == b"URPC"
    assert struct.unpack("<HH", raw[4:8]) == (1, 2)
    assert struct.unpack("<2Q", raw[8:24]) == (2, 3)
    assert struct.unpack("<6d", raw[24:]) == (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)


@pytest.mark.parametrize("shape", [(), (0,), (5,), (3, 4), (2, 3, 4)])
def test_round_trip_bit_exact(tmp_path, shape):
    x = np.random.default_rng(0).standard_normal(shape)
    urpc.save_tensor(tmp_path / "t.urpc", x)
    y = urpc.load_tensor(tmp_path / "t.urpc")
    assert y.shape == x.shape and y.dtype == np.float64
    assert y.tobytes() == x.tobytes()


def test_container_round_trip(tmp_path):
    tensors = {"b": np.arange(6.0).reshape(2, 3), "a": np.array(2.5), "c": np.zeros(0)}
    urpc.save_container(tmp_path / "c.urpc", {"kind": "demo", "n": 3}, tensors)
    header, got = urpc.load_container(tmp_path / "c.urpc")
    assert header["kind"] == "demo" and header["tensors"] == ["b", "a", "c"]
    assert list(got) == ["b", "a", "c"]
    for k in tensors:
        assert got[k].shape == tensors[k].shape
        np.testing.assert_array_equal(got[k], tensors[k])


def _write(path, data):
    path.write_bytes(data)
    return path


def test_errors(tmp_path):
    good = io.BytesIO()
    urpc.write_tensor(good, np.ones((2, 2)))
    raw = good.getvalue()
    with pytest.raises(FormatError, match="magic"):
        urpc.load_tensor(_write(tmp_path / "m", b"XXXX" + raw[4:]))
    with pytest.raises(FormatError, match="version"):
        urpc.load_tensor(_write(tmp_path / "v", raw[:4] + struct.pack("<H", 9) + raw[6:]))
    with pytest.raises(FormatError, match="truncated"):
        urpc.load_tensor(_write(tmp_path / "t", raw[:-3]))
    with pytest.raises(FormatError, match="trailing"):
        urpc.load_tensor(_write(tmp_path / "x", raw + b"\0"))
    urpc.save_container(tmp_path / "c", {}, {"a": np.ones(1)})
    with pytest.raises(FormatError):
        urpc.load_tensor(tmp_path / "c")
    with pytest.raises(FormatError):
        urpc.load_container(_write(tmp_path / "bare", raw))
