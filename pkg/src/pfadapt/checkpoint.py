"""Checkpoint container: a JSON manifest followed by one binary payload.

Layout::

    b"PFADAPT\\0"            8-byte magic
    uint32 LE               format version
    uint64 LE               manifest length in bytes
    manifest                UTF-8 JSON, sorted keys
    payload                 float32 LE weights, then uint8 owner masks

Every payload segment carries a sha256 in the manifest; so does the whole
payload. Loading verifies all of them before building any state.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, Param, ParamStore
from .packing import OwnershipMask

MAGIC = b"PFADAPT\0"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(RuntimeError):
    pass


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def encode_checkpoint(
    params: ParamStore,
    mask: OwnershipMask | None,
    meta: dict,
) -> bytes:
    tensors, masks, chunks = [], [], []
    offset = 0
    for name, p in params.items():
        raw = p.tensor.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(p.tensor.shape),
                "dtype": "float32-le",
                "prunable": p.prunable,
                "offset": offset,
                "nbytes": len(raw),
                "sha256": _sha(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    if mask is not None:
        for name, o in mask.owners.items():
            raw = o.contiguous().numpy().astype(np.uint8).tobytes()
            masks.append(
                {
                    "name": name,
                    "shape": list(o.shape),
                    "dtype": "uint8",
                    "offset": offset,
                    "nbytes": len(raw),
                    "sha256": _sha(raw),
                }
            )
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    manifest = dict(meta)
    manifest.update(
        {
            "format_version": FORMAT_VERSION,
            "tensors": tensors,
            "masks": masks if mask is not None else None,
            "num_pairs": mask.num_pairs if mask is not None else 0,
            "payload_nbytes": len(payload),
            "payload_sha256": _sha(payload),
        }
    )
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(mbytes)) + mbytes + payload


def decode_checkpoint(blob: bytes) -> tuple[ParamStore, OwnershipMask | None, dict]:
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"file too short for header ({len(blob)} bytes)")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    start = _HEADER.size
    if len(blob) < start + mlen:
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(blob[start : start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt manifest: {e}") from None
    if manifest.get("format_version") != version:
        raise CheckpointError("manifest format_version disagrees with header")
    payload = blob[start + mlen :]
    if len(payload) != manifest["payload_nbytes"]:
        raise CheckpointError(
            f"payload length {len(payload)} != expected {manifest['payload_nbytes']} (truncated or padded file)"
        )
    if _sha(payload) != manifest["payload_sha256"]:
        raise CheckpointError("payload checksum mismatch")

    def segment(entry, np_dtype):
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"] or _sha(raw) != entry["sha256"]:
            raise CheckpointError(f"segment {entry['name']!r} failed its checksum")
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(entry["shape"]).copy()
        return torch.from_numpy(arr)

    params = ParamStore()
    for e in manifest["tensors"]:
        params[e["name"]] = Param(segment(e, "<f4").to(torch.float32), bool(e["prunable"]))
    mask = None
    if manifest.get("masks") is not None:
        mask = OwnershipMask({e["name"]: segment(e, np.uint8) for e in manifest["masks"]}, manifest["num_pairs"])
    return params, mask, manifest


def save_bytes(path: str | Path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_bytes(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None


def model_config_from(manifest: dict) -> ModelConfig:
    return ModelConfig(**manifest["model_config"])
