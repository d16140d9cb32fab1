"""Canonical on-disk formats: datasets and parameter checkpoints.

Both formats are one UTF-8 JSON header line followed by a packed binary
payload.  Headers always carry a magic string, a format version, the
producing config hash, and the payload's SHA-256; loaders verify all of
them and refuse partial or tampered files.  Round-trips are bit-exact:
loading and re-saving produces byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

DATASET_MAGIC = "MOAN-DATASET"
CHECKPOINT_MAGIC = "MOAN-CHECKPOINT"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Unreadable, truncated, or mismatched artifact file."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """Stable hash of any JSON-serializable configuration description."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode(header: dict, payload: bytes) -> bytes:
    header = dict(header)
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    header["payload_bytes"] = len(payload)
    return canonical_json(header).encode() + b"\n" + payload


def _decode(path: str, magic: str) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise FormatError(f"{path}: no header line found")
    try:
        header = json.loads(raw[:newline].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    if header.get("magic") != magic:
        raise FormatError(f"{path}: magic {header.get('magic')!r}, expected {magic!r}")
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {header.get('version')!r}, expected {FORMAT_VERSION}")
    payload = raw[newline + 1:]
    expected = header.get("payload_bytes")
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header says {expected} (truncated?)")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise FormatError(f"{path}: payload checksum mismatch")
    return header, payload


def record_dtype(d_s: int, d_a: int) -> np.dtype:
    """Packed little-endian transition record."""
    return np.dtype([
        ("s", "<f4", (d_s,)),
        ("a", "<f4", (d_a,)),
        ("s_next", "<f4", (d_s,)),
        ("r", "<f4"),
        ("done", "u1"),
    ])


def save_dataset_file(path: str, header: dict, records: np.ndarray) -> None:
    """`records` must already use `record_dtype(d_s, d_a)`."""
    header = dict(header)
    header.setdefault("magic", DATASET_MAGIC)
    header.setdefault("version", FORMAT_VERSION)
    header["count"] = int(records.shape[0])
    atomic_write(path, _encode(header, records.tobytes()))


def load_dataset_file(path: str) -> tuple[dict, np.ndarray]:
    header, payload = _decode(path, DATASET_MAGIC)
    dtype = record_dtype(int(header["d_s"]), int(header["d_a"]))
    count = int(header["count"])
    if count * dtype.itemsize != len(payload):
        raise FormatError(f"{path}: {len(payload)} payload bytes do not hold {count} records")
    records = np.frombuffer(payload, dtype=dtype, count=count)
    return header, records


def save_checkpoint_file(path: str, kind: str, meta: dict, blocks: list[tuple[str, np.ndarray]],
                         cfg_hash: str = "") -> None:
    """Persist named float32 parameter blocks in order."""
    block_index = []
    chunks = []
    for name, arr in blocks:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        block_index.append({"name": name, "n_params": int(arr.size)})
        chunks.append(arr.tobytes())
    header = {
        "magic": CHECKPOINT_MAGIC,
        "version": FORMAT_VERSION,
        "kind": kind,
        "config_hash": cfg_hash,
        "blocks": block_index,
        "meta": meta,
    }
    atomic_write(path, _encode(header, b"".join(chunks)))


def load_checkpoint_file(path: str, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    header, payload = _decode(path, CHECKPOINT_MAGIC)
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise FormatError(f"{path}: checkpoint kind {header.get('kind')!r}, expected {expect_kind!r}")
    blocks: dict[str, np.ndarray] = {}
    off = 0
    for entry in header["blocks"]:
        n = int(entry["n_params"])
        end = off + 4 * n
        if end > len(payload):
            raise FormatError(f"{path}: block {entry['name']!r} exceeds payload")
        blocks[entry["name"]] = np.frombuffer(payload[off:end], dtype="<f4").copy()
        off = end
    if off != len(payload):
        raise FormatError(f"{path}: {len(payload) - off} trailing payload bytes")
    return header, blocks
