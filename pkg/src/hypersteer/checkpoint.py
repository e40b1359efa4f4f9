"""Checkpoints: a JSON header plus the shared binary tensor payload in one
file. The header carries the artifact version, kind, a config echo, and the
payload hash, which is verified on every load."""

from __future__ import annotations

import hashlib
import io
import json
import struct

from .numerics import read_named_tensors, write_named_tensors

MAGIC = b"HSCKPT1\n"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, kind: str, config_echo: dict, params: dict, order: list) -> None:
    if kind not in ("denoiser", "hypernet"):
        raise CheckpointError(f"unknown checkpoint kind '{kind}'")
    buf = io.BytesIO()
    write_named_tensors(buf, params, order)
    payload = buf.getvalue()
    header = {
        "version": 1,
        "kind": kind,
        "config": config_echo,
        "tensors": list(order),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def load_checkpoint(path, expect_kind: str | None = None) -> tuple[dict, dict]:
    try:
        fh = open(path, "rb")
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint file not found: {path}")
    with fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        payload = fh.read()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload hash mismatch; file corrupted")
    if expect_kind is not None and header["kind"] != expect_kind:
        raise CheckpointError(
            f"{path}: kind '{header['kind']}' does not match expected '{expect_kind}'"
        )
    params = read_named_tensors(io.BytesIO(payload), header["tensors"])
    return header, params


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]
