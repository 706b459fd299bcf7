"""The named-tensor container: format details and bit-exact round-trips."""

import numpy as np
import pytest

from helpers import micro_config
from litnet.checkpoint import MAGIC, load_tensors, save_tensors
from litnet.errors import ValidationError
from litnet.model import build


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a.w": rng.normal(size=(3, 4)).astype(np.float32),
        "b/with/slashes": rng.normal(size=(2, 2, 2)).astype(np.float32),
        "scalar": np.array(1.5, dtype=np.float32),
        "empty_axis": np.zeros((0, 4), dtype=np.float32),
    }
    path = tmp_path / "t.litckpt"
    save_tensors(path, tensors)
    loaded = load_tensors(path)
    assert list(loaded) == list(tensors)
    for name, arr in tensors.items():
        assert loaded[name].shape == arr.shape
        assert loaded[name].tobytes() == arr.tobytes()


def test_header_layout(tmp_path):
    path = tmp_path / "t.litckpt"
    save_tensors(path, {"x": np.array([1.0, 2.0], dtype=np.float32)})
    blob = path.read_bytes()
    assert blob[:8] == MAGIC == b"LITCKPT1"
    assert int.from_bytes(blob[8:16], "little") == 1       # name length
    assert blob[16:17] == b"x"
    assert int.from_bytes(blob[17:25], "little") == 1      # rank
    assert int.from_bytes(blob[25:33], "little") == 2      # extent
    assert np.frombuffer(blob[33:], dtype="<f4").tolist() == [1.0, 2.0]


def test_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.litckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(ValidationError):
        load_tensors(path)


def test_rejects_truncated_file(tmp_path):
    path = tmp_path / "t.litckpt"
    save_tensors(path, {"x": np.ones((4, 4), dtype=np.float32)})
    (tmp_path / "cut.litckpt").write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValidationError):
        load_tensors(tmp_path / "cut.litckpt")


def test_model_state_round_trip_bit_exact(tmp_path):
    model = build(micro_config(), seed=3)
    model.forward(np.random.default_rng(0).normal(size=(2, 32, 32, 3)), mode="train")
    path = tmp_path / "model.litckpt"
    model.save(path)

    other = build(micro_config(), seed=99)
    other.load(path)
    for name, arr in model.named_state().items():
        assert other.named_state()[name].tobytes() == np.asarray(arr, dtype=np.float32).tobytes(), name

    # logits agree bit for bit after the round trip
    x = np.random.default_rng(1).normal(size=(1, 32, 32, 3)).astype(np.float32)
    a = model.forward(x, mode="eval").data
    b = other.forward(x, mode="eval").data
    assert a.tobytes() == b.tobytes()
