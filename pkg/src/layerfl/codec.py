"""Binary wire format for client upload payloads.

Layout (all little-endian):

    header:    magic b"FLYR" | version u16 | client_id u32 | round u32 | L u16
    per unit:  index u16 | n u64 | n float32 values | ceil(n/8) mask bytes

Values are the unit's flattened parameters (weights then bias, row-major),
zeros where the mask deselects. Mask bits are packed little-endian within
each byte (bit j of byte b selects flat entry 8*b + j).

The simulator is single-process, but every upload is still encoded through
this codec so reported payload sizes reflect what a real transport would
carry.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .errors import IngestionError
from .mechanisms import MaskSet
from .nn import ParamSet, UnitTensors

MAGIC = b"FLYR"
VERSION = 1

_HEADER = struct.Struct("<4sHIIH")
_UNIT = struct.Struct("<HQ")


def encode_payload(client_id: int, round_idx: int, params: ParamSet, mask: MaskSet) -> bytes:
    """Serialize one client's masked upload."""
    chunks = [_HEADER.pack(MAGIC, VERSION, client_id, round_idx, params.n_units)]
    for i, (p, m) in enumerate(zip(params.units, mask.units), start=1):
        values = p.ravel().astype("<f4")
        bits = m.ravel().astype(np.uint8)
        chunks.append(_UNIT.pack(i, values.size))
        chunks.append(values.tobytes())
        chunks.append(np.packbits(bits, bitorder="little").tobytes())
    return b"".join(chunks)


def decode_payload(blob: bytes) -> dict:
    """Parse a payload back into flat per-unit value and mask arrays."""
    if len(blob) < _HEADER.size:
        raise IngestionError(f"payload truncated at offset {len(blob)}")
    magic, version, client_id, round_idx, n_units = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise IngestionError(f"bad payload magic {magic!r}")
    if version != VERSION:
        raise IngestionError(f"unsupported payload version {version}")
    offset = _HEADER.size
    units = []
    for _ in range(n_units):
        if len(blob) < offset + _UNIT.size:
            raise IngestionError(f"payload truncated at offset {offset}")
        index, n = _UNIT.unpack_from(blob, offset)
        offset += _UNIT.size
        mask_bytes = math.ceil(n / 8)
        end = offset + 4 * n + mask_bytes
        if len(blob) < end:
            raise IngestionError(f"payload truncated at offset {offset}")
        values = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        packed = np.frombuffer(blob, dtype=np.uint8, count=mask_bytes, offset=offset + 4 * n)
        bits = np.unpackbits(packed, bitorder="little", count=n)
        units.append({"index": index, "values": values, "mask": bits})
        offset = end
    if offset != len(blob):
        raise IngestionError(f"{len(blob) - offset} trailing bytes after payload")
    return {"client_id": client_id, "round": round_idx, "units": units}


def payload_num_bytes(params: ParamSet) -> int:
    """Exact encoded size for a payload of this geometry."""
    total = _HEADER.size
    for u in params.units:
        total += _UNIT.size + 4 * u.size + math.ceil(u.size / 8)
    return total


def restore_param_set(decoded: dict, template: ParamSet) -> tuple[ParamSet, MaskSet]:
    """Reshape decoded flat arrays into the geometry of ``template``."""
    p_units, m_units = [], []
    for entry, t in zip(decoded["units"], template.units):
        nw = t.weights.size
        vals = entry["values"]
        bits = entry["mask"]
        p_units.append(
            UnitTensors(
                vals[:nw].reshape(t.weights.shape).astype(t.weights.dtype),
                vals[nw:].reshape(t.bias.shape).astype(t.bias.dtype),
            )
        )
        m_units.append(
            UnitTensors(bits[:nw].reshape(t.weights.shape), bits[nw:].reshape(t.bias.shape))
        )
    return ParamSet(p_units), MaskSet(m_units)
