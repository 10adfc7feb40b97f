"""Model checkpoint serialization.

Layout: magic, format version, JSON header (variant, seed, grid, parameter
names and shapes in optimizer order, optional metadata), then each
parameter's little-endian float32 payload in header order, then a CRC32 of
everything after the magic. Saving and loading round-trip parameters
bit-exactly.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict

import numpy as np

from .errors import (ChecksumError, DatasetError, InvalidArgumentError,
                     TruncatedFileError, VersionMismatchError)
from .model import DrivingModel, VariantConfig
from .raster import GridConfig

MAGIC = b"BPCK"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


def save_checkpoint(model: DrivingModel, path, metadata: dict | None = None):
    params = model.named_parameters()
    header = {
        "format_version": FORMAT_VERSION,
        "variant": asdict(model.variant),
        "seed": model.seed,
        "grid": asdict(model.grid),
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params.items()],
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += _U32.pack(FORMAT_VERSION)
    body += _U32.pack(len(header_bytes))
    body += header_bytes
    for p in params.values():
        body += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(body)
        fh.write(_U32.pack(zlib.crc32(bytes(body))))


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"checkpoint ends inside {what}")
    return buf


def load_checkpoint(path):
    """Return (variant, seed, grid, name->float32 array, metadata)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DatasetError(f"cannot open checkpoint: {exc}") from exc
    with fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise DatasetError(f"not a checkpoint file: bad magic {magic!r}")
        rest = fh.read()
    if len(rest) < 12:
        raise TruncatedFileError("checkpoint ends inside framing")
    body, (crc_stored,) = rest[:-4], _U32.unpack(rest[-4:])
    if zlib.crc32(body) != crc_stored:
        raise ChecksumError("checkpoint payload failed its CRC32 check")
    (version,) = _U32.unpack(body[:4])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    (header_len,) = _U32.unpack(body[4:8])
    if len(body) < 8 + header_len:
        raise TruncatedFileError("checkpoint ends inside header")
    try:
        header = json.loads(body[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"unreadable checkpoint header: {exc}") from exc

    variant = VariantConfig(**header["variant"])
    grid = GridConfig(**header["grid"])
    offset = 8 + header_len
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = 4 * count
        if len(body) < offset + nbytes:
            raise TruncatedFileError(
                f"checkpoint ends inside parameter {entry['name']!r}")
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=offset)
        params[entry["name"]] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise DatasetError(
            f"checkpoint has {len(body) - offset} unexpected trailing bytes")
    return variant, int(header["seed"]), grid, params, header.get("metadata", {})


def restore_model(path) -> DrivingModel:
    """Rebuild a model from a checkpoint; parameters match bit for bit."""
    variant, seed, grid, params, _ = load_checkpoint(path)
    model = DrivingModel(variant, seed=seed, grid=grid)
    own = model.named_parameters()
    if set(own) != set(params):
        missing = sorted(set(own) ^ set(params))
        raise DatasetError(f"checkpoint parameter names do not match model: {missing}")
    for name, tensor in own.items():
        if tensor.shape != params[name].shape:
            raise DatasetError(
                f"shape mismatch for {name!r}: checkpoint {params[name].shape}, "
                f"model {tensor.shape}")
        tensor.data = params[name].astype(tensor.data.dtype)
    return model


def load_parameters(model: DrivingModel, path):
    """Overwrite ``model``'s parameters in place from a checkpoint."""
    variant, _, _, params, meta = load_checkpoint(path)
    if variant != model.variant:
        raise DatasetError("checkpoint was written by a different model variant")
    own = model.named_parameters()
    if set(own) != set(params):
        raise DatasetError("checkpoint parameter names do not match model")
    for name, tensor in own.items():
        tensor.data = params[name].astype(tensor.data.dtype)
    return meta
