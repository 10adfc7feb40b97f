"""Training example assembly and a checksummed binary dataset format.

Layout: magic, format version (u32), header length (u32), JSON header, then
per-record payloads.  Every tensor is stored as little-endian float32 and each
record carries its own CRC32, so corruption is pinned to a record index.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (ChecksumError, DatasetError, TruncatedFileError,
                     VersionMismatchError)
from .raster import (CHANNEL_NAMES, ROLLOUT_FACTOR, GridConfig,
                     future_object_occupancy, poses_to_agent, rasterize)
from .scenes import SCENARIO_KINDS, VectorScene, generate_scenario

MAGIC = b"BPDS"
FORMAT_VERSION = 1
_RECORD_META = struct.Struct("<BQ")
_CRC = struct.Struct("<I")


@dataclass
class Example:
    """One supervised sample in the agent frame."""

    channels: np.ndarray                 # (res, res, 17) float32
    expert_future: np.ndarray            # (K, 3) float32: x fwd, y left, rel heading
    future_object_occupancy: np.ndarray  # (K, res/factor, res/factor) float32
    kind: str
    seed: int

    def waypoints_px(self, grid: GridConfig) -> np.ndarray:
        return grid.meters_to_pixel(self.expert_future[:, :2].astype(np.float64))


def build_example(scene: VectorScene, grid: GridConfig = GridConfig()) -> Example:
    stack = rasterize(scene, grid)
    future = poses_to_agent(scene.expert_future, scene.agent_pose)
    return Example(
        channels=stack.channels,
        expert_future=future.astype(np.float32),
        future_object_occupancy=future_object_occupancy(scene, grid),
        kind=scene.kind,
        seed=int(scene.seed))


def example_from_spec(kind: str, seed: int,
                      grid: GridConfig = GridConfig()) -> Example:
    return build_example(generate_scenario(kind, seed), grid)


def _header_dict(grid: GridConfig, k_steps: int, count: int) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "field_of_view": grid.field_of_view,
        "resolution": grid.resolution,
        "rollout_factor": ROLLOUT_FACTOR,
        "channel_names": list(CHANNEL_NAMES),
        "k_steps": k_steps,
        "count": count,
    }


def _record_bytes(ex: Example) -> bytes:
    kind_idx = SCENARIO_KINDS.index(ex.kind)
    body = _RECORD_META.pack(kind_idx, ex.seed & 0xFFFFFFFFFFFFFFFF)
    body += np.ascontiguousarray(ex.channels, dtype="<f4").tobytes()
    body += np.ascontiguousarray(ex.expert_future, dtype="<f4").tobytes()
    body += np.ascontiguousarray(ex.future_object_occupancy, dtype="<f4").tobytes()
    return body + _CRC.pack(zlib.crc32(body))


def write_dataset(examples, path, grid: GridConfig = GridConfig()) -> Path:
    examples = list(examples)
    k_steps = len(examples[0].expert_future) if examples else 10
    header = json.dumps(_header_dict(grid, k_steps, len(examples)),
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        f.write(header)
        for ex in examples:
            f.write(_record_bytes(ex))
    return path


@dataclass
class Dataset:
    grid: GridConfig
    k_steps: int
    examples: list


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"unexpected end of file reading {what}")
    return buf


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        f = open(path, "rb")
    except OSError as e:
        raise DatasetError(f"cannot open dataset {path}: {e}") from e
    with f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise DatasetError(f"{path} is not a dataset file")
        version, hlen = struct.unpack("<II", _read_exact(f, 8, "header sizes"))
        if version != FORMAT_VERSION:
            raise VersionMismatchError(
                f"dataset version {version}, expected {FORMAT_VERSION}")
        header = json.loads(_read_exact(f, hlen, "header"))
        grid = GridConfig(field_of_view=header["field_of_view"],
                          resolution=header["resolution"])
        if tuple(header["channel_names"]) != CHANNEL_NAMES:
            raise DatasetError("dataset channel list does not match this build")
        k = int(header["k_steps"])
        res = grid.resolution
        rres = res // header["rollout_factor"]
        n_ch = len(CHANNEL_NAMES)
        body_len = (_RECORD_META.size + 4 * (res * res * n_ch + k * 3 + k * rres * rres))
        examples = []
        for i in range(int(header["count"])):
            body = _read_exact(f, body_len, f"record {i}")
            crc = _CRC.unpack(_read_exact(f, 4, f"record {i} checksum"))[0]
            if zlib.crc32(body) != crc:
                raise ChecksumError(f"checksum mismatch in record {i}")
            kind_idx, seed = _RECORD_META.unpack_from(body)
            off = _RECORD_META.size
            chan = np.frombuffer(body, "<f4", res * res * n_ch, off)
            off += chan.nbytes
            fut = np.frombuffer(body, "<f4", k * 3, off)
            off += fut.nbytes
            occ = np.frombuffer(body, "<f4", k * rres * rres, off)
            examples.append(Example(
                channels=chan.reshape(res, res, n_ch).copy(),
                expert_future=fut.reshape(k, 3).copy(),
                future_object_occupancy=occ.reshape(k, rres, rres).copy(),
                kind=SCENARIO_KINDS[kind_idx],
                seed=int(seed)))
        if f.read(1):
            raise DatasetError(f"{path} has trailing bytes after the last record")
    return Dataset(grid=grid, k_steps=k, examples=examples)
