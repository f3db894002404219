import struct

import numpy as np
import pytest

from headflow import container
from headflow.errors import InputError


def test_roundtrip_bit_exact():
    rng = np.random.default_rng(0)
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": np.array([np.float32(1e-30), -0.0], np.float32)}
    cfg, back, meta = container.loads(container.dumps({"x": 1}, tensors, {"note": "hi"}))
    assert cfg == {"x": 1} and meta == {"note": "hi"}
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()


def test_layout():
    blob = container.dumps({}, {"t": np.arange(3, dtype=np.float32)})
    assert blob[:5] == b"HATW1"
    (hlen,) = struct.unpack("<I", blob[5:9])
    assert len(blob) == 9 + hlen + 12
    assert np.frombuffer(blob[9 + hlen:], "<f4").tolist() == [0.0, 1.0, 2.0]


def test_deterministic_bytes():
    t = {"z": np.ones(2, np.float32), "a": np.zeros(1, np.float32)}
    assert container.dumps({"b": 1, "a": 2}, t) == container.dumps({"a": 2, "b": 1}, dict(t))


@pytest.mark.parametrize("blob", [b"NOPE!....", b"HATW1\x05\x00\x00\x00{bad}", b"HATW1"])
def test_corrupt(blob):
    with pytest.raises(InputError):
        container.loads(blob)


def test_truncated_payload():
    blob = container.dumps({}, {"t": np.arange(4, dtype=np.float32)})
    with pytest.raises(InputError):
        container.loads(blob[:-4])


def test_missing_file(tmp_path):
    with pytest.raises(InputError):
        container.read(tmp_path / "nope.hatw")
