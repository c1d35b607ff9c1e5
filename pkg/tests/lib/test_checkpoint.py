import numpy as np
import pytest

from ravenforge.errors import FormatError, NumericError, TrainingAborted
from ravenforge.lib.checkpoint import (
    abort_training,
    decode_tensors,
    encode_tensors,
    load_checkpoint,
    save_checkpoint,
    sidecar_path,
    state_hash,
)


@pytest.fixture
def state(rng):
    return {
        "encoder.weight": rng.normal(size=(3, 2)).astype(np.float32),
        "encoder.bias": np.zeros(3, dtype=np.float32),
        "scalar": np.array(1.5, dtype=np.float32),
    }


def test_encoding_preserves_names_order_and_values(state):
    decoded = decode_tensors(encode_tensors(state))
    assert list(decoded) == list(state)
    for name, values in state.items():
        assert decoded[name].dtype == np.float32
        np.testing.assert_array_equal(decoded[name], values)


def test_header_layout(state):
    blob = encode_tensors(state)
    assert blob[:4] == b"RVF1"
    assert int.from_bytes(blob[4:8], "little") == 3


def test_wrong_magic(state):
    blob = encode_tensors(state)
    with pytest.raises(FormatError):
        decode_tensors(b"XXXX" + blob[4:])


def test_flipped_byte_fails_checksum(state):
    blob = bytearray(encode_tensors(state))
    blob[20] ^= 0xFF
    with pytest.raises(FormatError):
        decode_tensors(bytes(blob))


def test_state_hash_tracks_single_bit_changes(state):
    before = state_hash(state)
    assert state_hash(dict(state)) == before
    state["encoder.bias"][0] = np.float32(1e-30)
    assert state_hash(state) != before


def test_save_and_load_with_sidecar(tmp_path, state):
    path = save_checkpoint(tmp_path / "model.rvf", state, {"kind": "vae", "seed": 4})
    assert sidecar_path(path).name == "model.rvf.json"
    loaded, meta = load_checkpoint(path)
    assert meta == {"kind": "vae", "seed": 4}
    assert state_hash(loaded) == state_hash(state)


def test_abort_training_dumps_state(tmp_path, state):
    with pytest.raises(TrainingAborted) as excinfo:
        abort_training(state, tmp_path / "ckpt.rvf", 17, {"kind": "vae"}, NumericError("nan"))
    error = excinfo.value
    assert error.step == 17
    assert error.dump_path == tmp_path / "ckpt.abort.rvf"
    loaded, meta = load_checkpoint(error.dump_path)
    assert meta["step"] == 17
    assert list(loaded) == list(state)


def test_abort_training_without_output(state):
    with pytest.raises(TrainingAborted) as excinfo:
        abort_training(state, None, 3, {}, NumericError("inf"))
    assert excinfo.value.dump_path is None
