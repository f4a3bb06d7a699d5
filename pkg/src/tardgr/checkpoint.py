"""Shared checkpoint container.

Layout: magic bytes "TARDGR01", newline, a `manifest_bytes N` line, N
bytes of UTF-8 manifest text, then the raw payload of every array
concatenated as little-endian 32-bit floats, row-major.

Manifest lines:
    meta <key> <value>
    array <name> <d0>x<d1>... <element offset>

Arrays are written sorted by name and metadata sorted by key, so the
same content always produces the same bytes.
"""
from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "file_sha256", "MAGIC"]

MAGIC = b"TARDGR01"


def _shape_token(shape: tuple) -> str:
    if shape == ():
        raise ValueError("0-d arrays not supported; reshape to (1,)")
    return "x".join(str(int(s)) for s in shape)


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    names = sorted(arrays)
    lines = []
    for key in sorted(meta or {}):
        value = str((meta or {})[key])
        if "\n" in value:
            raise ValueError(f"meta value for {key!r} contains a newline")
        lines.append(f"meta {key} {value}")
    offset = 0
    payloads = []
    for name in names:
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f4"))
        lines.append(f"array {name} {_shape_token(arr.shape)} {offset}")
        offset += arr.size
        payloads.append(arr.tobytes())
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(f"manifest_bytes {len(manifest)}\n".encode("ascii"))
        fh.write(manifest)
        fh.write(b"".join(payloads))


def load_checkpoint(path):
    """Returns (arrays, meta). Rejects wrong magic and short payloads."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header = MAGIC + b"\n"
    if not blob.startswith(header):
        raise ValueError(f"{path}: not a {MAGIC.decode()} checkpoint")
    rest = blob[len(header):]
    nl = rest.index(b"\n")
    tag, count = rest[:nl].decode("ascii").split()
    if tag != "manifest_bytes":
        raise ValueError(f"{path}: malformed manifest size line")
    msize = int(count)
    manifest = rest[nl + 1: nl + 1 + msize].decode("utf-8")
    payload = rest[nl + 1 + msize:]
    arrays: dict = {}
    meta: dict = {}
    specs = []
    for line in manifest.splitlines():
        parts = line.split(" ", 2)
        if parts[0] == "meta":
            key, value = parts[1], parts[2] if len(parts) > 2 else ""
            meta[key] = value
        elif parts[0] == "array":
            name, tail = parts[1], parts[2]
            shape_tok, offset_tok = tail.rsplit(" ", 1)
            shape = tuple(int(s) for s in shape_tok.split("x"))
            specs.append((name, shape, int(offset_tok)))
        else:
            raise ValueError(f"{path}: unknown manifest line {line!r}")
    for name, shape, offset in specs:
        size = int(np.prod(shape, dtype=np.int64))
        start = offset * 4
        end = start + size * 4
        if end > len(payload):
            raise ValueError(
                f"{path}: truncated payload for array {name!r} at element "
                f"offset {offset}: need {end} bytes, have {len(payload)}")
        arrays[name] = np.frombuffer(
            payload[start:end], dtype="<f4").reshape(shape).astype(
                np.float32, copy=True)
    return arrays, meta


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
