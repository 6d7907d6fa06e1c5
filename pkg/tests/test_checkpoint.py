import struct

import numpy as np
import pytest

from picanet import checkpoint
from picanet.certify import tiny_network_spec
from picanet.errors import CheckpointError, ConfigurationError
from picanet.network import NetworkSpec, SaliencyNet


def hand_record(name, arr, code):
    raw = name.encode()
    return (struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim)
            + b"".join(struct.pack("<I", d) for d in arr.shape)
            + arr.astype("<f4" if code == 0 else "<f8").tobytes())


def hand_file(records):
    return b"PICA" + struct.pack("<II", 1, len(records)) + b"".join(records)


def test_encoding_matches_hand_layout():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    b = np.array([1.5], dtype=np.float64)
    blob = checkpoint.encode({"w": a, "bias": b})
    assert blob == hand_file([hand_record("w", a, 0), hand_record("bias", b, 1)])


def test_empty_registry_is_twelve_bytes():
    assert checkpoint.encode({}) == b"PICA\x01\x00\x00\x00\x00\x00\x00\x00"


def test_registry_round_trip_is_byte_exact(tmp_path):
    net = SaliencyNet(NetworkSpec(), seed=2)
    path = tmp_path / "model.pica"
    checkpoint.save(net.registry, str(path))
    first = path.read_bytes()
    other = SaliencyNet(NetworkSpec(), seed=9)
    checkpoint.load_into(other.registry, str(path))
    for name, t in net.registry.items():
        assert other.registry[name].data.tobytes() == t.data.tobytes()
    checkpoint.save(other.registry, str(path))
    assert path.read_bytes() == first
    assert list(checkpoint.load(str(path))) == net.registry.names()


def test_float64_and_scalar_records(tmp_path):
    state = {"s": np.array(3.25), "m": np.zeros((0, 4)), "d": np.arange(3.0)}
    path = tmp_path / "x.pica"
    checkpoint.save(state, str(path))
    loaded = checkpoint.load(str(path))
    for k, v in state.items():
        assert loaded[k].dtype == v.dtype and np.array_equal(loaded[k], v)


def test_truncation_names_the_record(tmp_path):
    net = SaliencyNet(tiny_network_spec(), seed=0)
    blob = checkpoint.encode(net.registry.state())
    with pytest.raises(CheckpointError, match="encoder.block1.conv1.weight"):
        checkpoint.decode(blob[:12 + 2 + 27 + 2 + 16 + 10])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.decode(blob[:-1])


@pytest.mark.parametrize("blob,pattern", [
    (b"PIC", "too short"),
    (b"ABCD" + struct.pack("<II", 1, 0), "magic"),
    (b"PICA" + struct.pack("<II", 2, 0), "version"),
    (hand_file([]) + b"\x00", "trailing"),
])
def test_corrupt_headers(blob, pattern):
    with pytest.raises(CheckpointError, match=pattern):
        checkpoint.decode(blob)


def test_duplicate_records_rejected():
    a = np.zeros(2, dtype=np.float32)
    with pytest.raises(CheckpointError, match="duplicate"):
        checkpoint.decode(hand_file([hand_record("w", a, 0), hand_record("w", a, 0)]))


def test_unknown_dtype_code():
    rec = bytearray(hand_record("w", np.zeros(1, dtype=np.float32), 0))
    rec[3] = 7
    with pytest.raises(CheckpointError, match="dtype"):
        checkpoint.decode(hand_file([bytes(rec)]))


def test_unsupported_array_dtype():
    with pytest.raises(CheckpointError):
        checkpoint.encode({"i": np.arange(3)})


def test_load_into_mismatched_registry(tmp_path):
    path = tmp_path / "tiny.pica"
    checkpoint.save(SaliencyNet(tiny_network_spec("NNNNN")).registry, str(path))
    with pytest.raises(ConfigurationError):
        checkpoint.load_into(SaliencyNet(tiny_network_spec("GGLLN")).registry, str(path))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint.load(str(tmp_path / "nope.pica"))


def test_save_leaves_no_temp_files(tmp_path):
    checkpoint.save({"a": np.zeros(3, dtype=np.float32)}, str(tmp_path / "a.pica"))
    assert [p.name for p in tmp_path.iterdir()] == ["a.pica"]
