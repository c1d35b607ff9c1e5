"""The `RVF1` checkpoint codec.

Layout (little-endian):

    b"RVF1"
    u32 record count
    per record: u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
                prod(dims) x f32 values
    u32 CRC32 of every byte between the magic and the checksum

Each checkpoint `ckpt.rvf` has a JSON sidecar `ckpt.rvf.json` with the
metadata needed to rebuild the model around the tensors.
"""

import hashlib
import json
import logging
import struct
import zlib
from pathlib import Path
from typing import Any, NoReturn

import numpy as np

from ravenforge.errors import FormatError, TrainingAborted

logger = logging.getLogger(__name__)

MAGIC = b"RVF1"


def encode_tensors(state: dict[str, np.ndarray]) -> bytes:
    """Serialize named arrays (in insertion order) to `RVF1` bytes."""
    payload = bytearray(struct.pack("<I", len(state)))
    for name, values in state.items():
        encoded = name.encode("utf-8")
        values = np.asarray(values)
        payload += struct.pack("<H", len(encoded)) + encoded
        payload += struct.pack("<B", values.ndim)
        payload += struct.pack(f"<{values.ndim}I", *values.shape)
        payload += np.ascontiguousarray(values, dtype="<f4").tobytes()
    return MAGIC + bytes(payload) + struct.pack("<I", zlib.crc32(payload))


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    """Parse `RVF1` bytes back into named float32 arrays.

    Raises:
        FormatError: On a wrong magic, truncated record or checksum mismatch
    """
    if blob[:4] != MAGIC:
        raise FormatError(f"not an RVF1 checkpoint (magic {blob[:4]!r})")
    payload, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise FormatError("RVF1 checksum mismatch")
    try:
        (count,) = struct.unpack_from("<I", payload, 0)
        offset = 4
        state: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", payload, offset)
            offset += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            values = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            state[name] = values.reshape(shape).astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise FormatError(f"truncated or corrupt RVF1 payload: {e}") from e
    if offset != len(payload):
        raise FormatError(f"{len(payload) - offset} trailing bytes in RVF1 payload")
    return state


def state_hash(state: dict[str, np.ndarray]) -> str:
    """SHA-256 of the `RVF1` encoding; equal hashes mean bit-identical tensors."""
    return hashlib.sha256(encode_tensors(state)).hexdigest()


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_checkpoint(path: Path, state: dict[str, np.ndarray], meta: dict[str, Any]) -> Path:
    """Write `state` to `path` and `meta` to its JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(state))
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    logger.info("Saved checkpoint %s (%d tensors)", path, len(state))
    return path


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a checkpoint and its sidecar (empty metadata if the sidecar is absent)."""
    path = Path(path)
    state = decode_tensors(path.read_bytes())
    meta_path = sidecar_path(path)
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return state, meta


def abort_training(
    state: dict[str, np.ndarray],
    out: Path | None,
    step: int,
    meta: dict[str, Any],
    error: Exception,
) -> NoReturn:
    """Dump `state` next to `out` (if given) and raise `TrainingAborted`."""
    dump = None
    if out is not None:
        dump = save_checkpoint(Path(out).with_suffix(".abort.rvf"), state, {**meta, "step": step})
    logger.error("Non-finite loss at step %d; state dumped to %s", step, dump)
    message = f"non-finite loss at step {step}: {error}"
    raise TrainingAborted(message, step=step, dump_path=dump) from error
