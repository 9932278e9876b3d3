import json
import struct

import numpy as np
import pytest

from neurospike.errors import FormatError
from neurospike.storage import (
    load_checkpoint,
    read_ntsr,
    read_spkt,
    save_checkpoint,
    write_ntsr,
    write_spkt,
)
from neurospike.tensor import Tensor


def test_ntsr_header_layout(tmp_path):
    path = tmp_path / "x.ntsr"
    write_ntsr(path, np.arange(6, dtype=np.float32).reshape(2, 3))
    raw = path.read_bytes()
    assert raw[:4] == b"NTSR"
    assert struct.unpack_from("<IIII", raw, 4) == (1, 2, 2, 3)
    assert len(raw) == 4 + 4 * 4 + 6 * 4
    assert struct.unpack_from("<f", raw, 20)[0] == 0.0


def test_ntsr_keeps_values_and_accepts_tensors(tmp_path):
    values = np.random.default_rng(0).standard_normal((3, 4, 5))
    write_ntsr(tmp_path / "t.ntsr", Tensor(values))
    loaded = read_ntsr(tmp_path / "t.ntsr")
    assert loaded.dtype == np.float32
    assert loaded.flags.writeable
    np.testing.assert_array_equal(loaded, values.astype(np.float32))


def test_spkt_payload_is_one_byte_per_spike(tmp_path):
    spikes = np.zeros((19, 10), dtype=np.uint8)
    spikes[3, 4] = 1
    write_spkt(tmp_path / "s.spkt", spikes)
    raw = (tmp_path / "s.spkt").read_bytes()
    assert raw[:4] == b"SPKT"
    assert len(raw) == 4 + 4 * 4 + 190
    np.testing.assert_array_equal(read_spkt(tmp_path / "s.spkt"), spikes)


def test_spkt_rejects_non_binary_payload(tmp_path):
    with pytest.raises(FormatError):
        write_spkt(tmp_path / "s.spkt", np.array([0, 2]))


@pytest.mark.parametrize(
    "corrupt, message",
    [
        (lambda raw: b"XXXX" + raw[4:], "bad magic"),
        (lambda raw: raw[:4] + struct.pack("<I", 2) + raw[8:], "version"),
        (lambda raw: raw[:-4], "payload"),
    ],
)
def test_corrupt_ntsr_files(tmp_path, corrupt, message):
    path = tmp_path / "x.ntsr"
    write_ntsr(path, np.ones((2, 2)))
    path.write_bytes(corrupt(path.read_bytes()))
    with pytest.raises(FormatError, match=message):
        read_ntsr(path)


def test_spkt_is_not_read_as_ntsr(tmp_path):
    write_spkt(tmp_path / "s.spkt", np.ones(3, dtype=np.uint8))
    with pytest.raises(FormatError):
        read_ntsr(tmp_path / "s.spkt")


def test_checkpoint_round_trip(tmp_path):
    parameters = {
        "conv1/kernels": Tensor(np.ones((2, 1, 3, 3), dtype=np.float32)),
        "output/b": np.array([0.5, -0.5], dtype=np.float32),
    }
    index = save_checkpoint(tmp_path / "ckpt", parameters, {"kind": "cnn"})
    written = json.loads(index.read_text())
    assert written["tensors"]["conv1/kernels"]["file"] == "conv1.kernels.ntsr"

    metadata, arrays = load_checkpoint(tmp_path / "ckpt")
    assert metadata == {"kind": "cnn"}
    assert arrays["conv1/kernels"].shape == (2, 1, 3, 3)
    np.testing.assert_array_equal(arrays["output/b"], [0.5, -0.5])


def test_checkpoint_without_index(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path)
