"""Binary checkpoint container.

Layout (all integers little-endian):

    magic   b"PKCK"
    version u32 (currently 1)
    hlen    u64, followed by hlen bytes of canonical JSON header

The header carries a free-form ``manifest`` dict plus ordered records for
dense tensors (name, dtype tag f32/f64, shape, byte length) and quantized
layers (shape, block sizes, code/absmax byte lengths, group count).  Raw
payloads follow in record order: tensor buffers, then per quantized layer
its packed codes, absmax codes, group scales and offsets as f64.

Round trips are bit-exact; save -> load -> save produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ShapeError
from .quantize import QuantizedLinear
from .tensor import Tensor

MAGIC = b"PKCK"
FORMAT_VERSION = 1

_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _tag_of(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray],
                    manifest: dict | None = None,
                    quantized: dict[str, QuantizedLinear] | None = None) -> None:
    manifest = manifest or {}
    quantized = quantized or {}
    records = []
    payloads: list[bytes] = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        tag = _tag_of(arr)
        raw = arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes()
        records.append({"name": name, "dtype": tag,
                        "shape": list(arr.shape), "nbytes": len(raw)})
        payloads.append(raw)
    qrecords = []
    for name in sorted(quantized):
        q = quantized[name]
        codes = q.packed.tobytes()
        am = q.absmax_codes.tobytes()
        scales = q.group_scales.astype("<f8").tobytes()
        offsets = q.group_offsets.astype("<f8").tobytes()
        qrecords.append({
            "name": name, "shape": list(q.shape), "block_size": q.block_size,
            "dq_group_size": q.dq_group_size, "dtype": _tag_of(np.zeros(0, q.dtype)),
            "code_nbytes": len(codes), "absmax_nbytes": len(am),
            "n_groups": len(q.group_scales),
        })
        payloads.extend([codes, am, scales, offsets])
    header = json.dumps(
        {"manifest": manifest, "tensors": records, "quantized": qrecords},
        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict,
                                               dict[str, QuantizedLinear]]:
    """Returns (tensors, manifest, quantized layers)."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a peftkit checkpoint")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}")
    hlen = struct.unpack("<Q", blob[8:16])[0]
    if len(blob) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(blob[16:16 + hlen])
    pos = 16 + hlen

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated payload")
        out = blob[pos:pos + n]
        pos += n
        return out

    tensors: dict[str, np.ndarray] = {}
    for rec in header["tensors"]:
        dt = _DTYPE_TAGS[rec["dtype"]]
        arr = np.frombuffer(take(rec["nbytes"]), dtype=dt).reshape(rec["shape"])
        tensors[rec["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    quantized: dict[str, QuantizedLinear] = {}
    for rec in header["quantized"]:
        codes = np.frombuffer(take(rec["code_nbytes"]), dtype=np.uint8).copy()
        am = np.frombuffer(take(rec["absmax_nbytes"]), dtype=np.uint8).copy()
        scales = np.frombuffer(take(rec["n_groups"] * 8), dtype="<f8").astype(np.float64)
        offsets = np.frombuffer(take(rec["n_groups"] * 8), dtype="<f8").astype(np.float64)
        quantized[rec["name"]] = QuantizedLinear(
            tuple(rec["shape"]), codes, am, scales, offsets,
            rec["block_size"], rec["dq_group_size"], bias=None,
            dtype=_DTYPE_TAGS[rec["dtype"]].newbyteorder("="))
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return tensors, header["manifest"], quantized


def params_to_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in params.items()}


def load_params_into(params: dict[str, Tensor], arrays: dict[str, np.ndarray],
                     prefix: str = "") -> None:
    """Copy arrays into existing parameter tensors, checking shapes."""
    for name, p in params.items():
        key = prefix + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != p.shape:
            raise ShapeError(
                f"parameter {key!r}: checkpoint shape {tuple(arr.shape)} != model {p.shape}")
        p.data = arr.astype(p.dtype, copy=True)
