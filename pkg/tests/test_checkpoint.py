import struct

import numpy as np
import pytest

from splatseg.checkpoint import CheckpointError, decode, encode, load_checkpoint, save_checkpoint


def _params(seed=0):
    rng = np.random.default_rng(seed)
    return {"enc.w": rng.normal(size=(3, 4)), "bias": rng.normal(size=4), "scalar": np.array(2.5),
            "ünïcode.name": rng.normal(size=(2, 1, 3))}


def test_round_trip_exact(tmp_path):
    p = _params()
    save_checkpoint(tmp_path / "a.ckpt", p)
    q = load_checkpoint(tmp_path / "a.ckpt")
    assert list(q) == list(p)
    for k in p:
        assert q[k].shape == np.shape(p[k])
        assert np.array_equal(q[k], p[k])


def test_encoding_is_deterministic():
    assert encode(_params(3)) == encode(_params(3))


def test_layout_header():
    buf = encode({"x": np.zeros((2, 3))})
    assert buf[:4] == b"SPLK"
    version, count, name_len = struct.unpack("<III", buf[4:16])
    assert (version, count, name_len) == (1, 1, 1)
    assert len(buf) == 4 + 8 + 4 + 1 + 4 + 16 + 48


def test_bad_magic_and_version():
    buf = encode({"x": np.zeros(2)})
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError, match="version"):
        decode(buf[:4] + struct.pack("<I", 9) + buf[8:])


@pytest.mark.parametrize("cut", [6, 14, 20, 30, -1])
def test_truncation_detected(cut):
    buf = encode({"weights": np.arange(6.0).reshape(2, 3)})
    with pytest.raises(CheckpointError, match="truncated"):
        decode(buf[:cut])
