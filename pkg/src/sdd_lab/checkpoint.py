"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic  b"SDD1"
    u32    format version (currently 1)
    u32    record count
    per record:
        u32      name length, then UTF-8 name bytes
        u32      ndim, then u32 per extent
        f32[n]   raw parameter values
        u8[...]  mask bitset, 1 bit per element (LSB-first), padded to a byte

Non-prunable parameters and batchnorm running statistics carry an all-ones
bitset. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .models import Model

MAGIC = b"SDD1"
VERSION = 1

_BN_SUFFIXES = (".running_mean", ".running_var", ".batches_seen")


class CheckpointError(ValueError):
    pass


def _pack_record(name: str, data: np.ndarray, mask: np.ndarray | None) -> bytes:
    flat = np.ascontiguousarray(data, dtype="<f4")
    if mask is None:
        bits = np.ones(flat.size, dtype=np.uint8)
    else:
        bits = (np.asarray(mask).reshape(-1) != 0).astype(np.uint8)
    packed = np.packbits(bits, bitorder="little")
    name_b = name.encode("utf-8")
    head = struct.pack("<I", len(name_b)) + name_b
    head += struct.pack("<I", flat.ndim) + struct.pack(f"<{flat.ndim}I", *flat.shape)
    return head + flat.tobytes() + packed.tobytes()


def save_checkpoint(model: Model, masks: dict[str, np.ndarray], path) -> None:
    """Write all parameters, their masks, and batchnorm statistics."""
    records = []
    for name, p in model.params.items():
        records.append(_pack_record(name, p.data, masks.get(name)))
    for bn_name, state in model.bn_state.items():
        records.append(_pack_record(f"{bn_name}.running_mean", state.running_mean, None))
        records.append(_pack_record(f"{bn_name}.running_var", state.running_var, None))
        records.append(_pack_record(f"{bn_name}.batches_seen",
                                    np.asarray([state.batches_seen], dtype=np.float32), None))
    blob = MAGIC + struct.pack("<II", VERSION, len(records)) + b"".join(records)
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Read the container; returns name -> (float32 array, binary mask array)."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint container: {path}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 12
    records: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        end = offset + 4 * n
        if end > len(blob):
            raise CheckpointError(f"truncated record {name!r}")
        data = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
        nbytes = (n + 7) // 8
        end = offset + nbytes
        if end > len(blob):
            raise CheckpointError(f"truncated mask for record {name!r}")
        bits = np.unpackbits(np.frombuffer(blob[offset:end], dtype=np.uint8),
                             bitorder="little")[:n]
        offset = end
        records[name] = (data, bits.reshape(shape).astype(np.float32))
    if offset != len(blob):
        raise CheckpointError("trailing bytes after last record")
    return records


def restore_model(model: Model, records: dict) -> dict[str, np.ndarray]:
    """Load parameters and batchnorm stats into `model`; returns the MaskSet."""
    dtype = next(iter(model.params.values())).data.dtype
    for name, p in model.params.items():
        if name not in records:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        data, _ = records[name]
        if data.shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: "
                                  f"{data.shape} vs {p.data.shape}")
        p.data[...] = data.astype(dtype, copy=False)
    for bn_name, state in model.bn_state.items():
        state.running_mean[...] = records[f"{bn_name}.running_mean"][0]
        state.running_var[...] = records[f"{bn_name}.running_var"][0]
        state.batches_seen = int(records[f"{bn_name}.batches_seen"][0][0])
    masks = {}
    for name in model.prunable:
        masks[name] = records[name][1].astype(dtype, copy=False).copy()
    return masks
