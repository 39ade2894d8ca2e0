"""Checkpoint files: a JSON header followed by little-endian float64 payload.

Layout::

    <8-byte little-endian uint64 header length N>
    <N bytes UTF-8 JSON header>
    <payload: every tensor of every section, C order, '<f8'>

The header lists sections in sorted order, each as ``[[name, shape], ...]``, plus
free-form metadata and the SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

FORMAT = "latentplan-ckpt/1"


class CheckpointError(IOError):
    pass


def encode_checkpoint(sections: Mapping[str, Mapping[str, torch.Tensor]], meta: dict) -> bytes:
    layout = {}
    chunks = []
    # the header is written with sorted keys, so the payload follows sorted section order
    for sec in sorted(sections):
        layout[sec] = []
        for name, t in sections[sec].items():
            arr = t.detach().to(torch.float64).cpu().numpy()
            layout[sec].append([name, list(arr.shape)])
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = b"".join(chunks)
    header = {"format": FORMAT, "sections": layout, "meta": meta,
              "payload_sha256": hashlib.sha256(payload).hexdigest()}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(hb)) + hb + payload


def decode_checkpoint(data: bytes, dtype: torch.dtype | None = None):
    if len(data) < 8:
        raise CheckpointError("truncated checkpoint")
    (n,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    if header.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')!r}")
    payload = data[8 + n:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("checkpoint payload hash mismatch")
    flat = np.frombuffer(payload, dtype="<f8")
    pos = 0
    sections = {}
    for sec, entries in header["sections"].items():
        sections[sec] = {}
        for name, shape in entries:
            size = int(np.prod(shape)) if shape else 1
            arr = flat[pos:pos + size].reshape(shape).copy()
            pos += size
            t = torch.from_numpy(arr)
            sections[sec][name] = t.to(dtype) if dtype is not None else t
    if pos != flat.size:
        raise CheckpointError("checkpoint payload length does not match its header")
    return header, sections


def save_checkpoint(path, sections, meta: dict) -> str:
    data = encode_checkpoint(sections, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, dtype: torch.dtype | None = None):
    return decode_checkpoint(Path(path).read_bytes(), dtype)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
