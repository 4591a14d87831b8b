"""Binary checkpoints: primitive cloud, environment, optimizer state and config.

Layout (all integers little-endian):

    magic    8 bytes  b"SDFSPLAT"
    version  u32      FORMAT_VERSION
    hlen     u32      length of the header in bytes
    header   hlen     UTF-8 JSON (sorted keys, compact separators)
    payload           arrays back to back, raw little-endian float64, C order
    crc      u32      CRC-32 of every preceding byte

The header lists each array as [name, shape] in payload order and carries
the scalars: iteration, gates, RNG state, log_gamma, environment prefilter
settings and the config as `key = value` text.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gaussians import GaussianCloud
from .images import atomic_write_bytes
from .shading import EnvironmentLight
from .trainer import PARAMS, AdamMoments, TrainConfig, TrainState

MAGIC = b"SDFSPLAT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")
_CRC = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    cloud: GaussianCloud
    env: EnvironmentLight
    state: TrainState
    config: TrainConfig


def _arrays(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"cloud.{n}", getattr(ck.cloud, n)) for n in GaussianCloud.ARRAY_FIELDS]
    out.append(("env.radiance", ck.env.radiance))
    for name in PARAMS:
        mo = ck.state.moments[name]
        out += [(f"adam.{name}.m", np.asarray(mo.m)), (f"adam.{name}.v", np.asarray(mo.v))]
    out += [("densify.grad_accum", ck.state.grad_accum),
            ("densify.grad_count", ck.state.grad_count)]
    return out


def to_bytes(ck: Checkpoint) -> bytes:
    arrays = _arrays(ck)
    header = {
        "arrays": [[name, list(np.shape(a))] for name, a in arrays],
        "iteration": int(ck.state.iteration),
        "median_active": bool(ck.state.median_active),
        "projection_active": bool(ck.state.projection_active),
        "rng_state": ck.state.rng_state,
        "log_gamma": float(ck.cloud.log_gamma),
        "env": {"levels": ck.env.levels, "samples": ck.env.samples, "seed": ck.env.seed},
        "config": ck.config.to_text(),
    }
    h = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(h)), h]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays]
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def from_bytes(data: bytes, source: str = "checkpoint") -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{source}: truncated checkpoint ({len(data)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} "
                              f"(this build reads version {FORMAT_VERSION})")
    end = _PREFIX.size + hlen
    if len(data) < end + _CRC.size:
        raise CheckpointError(f"{source}: truncated checkpoint (header incomplete)")
    try:
        header = json.loads(data[_PREFIX.size:end])
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{source}: corrupt checkpoint header") from None
    sizes = [int(np.prod(shape, dtype=np.int64)) * 8 for _, shape in header["arrays"]]
    expected = end + sum(sizes) + _CRC.size
    if len(data) != expected:
        kind = "truncated" if len(data) < expected else "oversized"
        raise CheckpointError(f"{source}: {kind} checkpoint ({len(data)} bytes, "
                              f"expected {expected})")
    (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if crc != zlib.crc32(data[:-_CRC.size]):
        raise CheckpointError(f"{source}: checksum mismatch (corrupt checkpoint)")

    arrays, off = {}, end
    for (name, shape), size in zip(header["arrays"], sizes):
        arrays[name] = np.frombuffer(data, "<f8", size // 8, off).reshape(shape).astype(np.float64)
        off += size

    cloud = GaussianCloud(*(arrays[f"cloud.{n}"] for n in GaussianCloud.ARRAY_FIELDS),
                          log_gamma=header["log_gamma"])
    e = header["env"]
    env = EnvironmentLight(arrays["env.radiance"], e["levels"], e["samples"], e["seed"])
    moments = {}
    for name in PARAMS:
        m, v = arrays[f"adam.{name}.m"], arrays[f"adam.{name}.v"]
        moments[name] = AdamMoments(m, v)
    state = TrainState(header["iteration"], moments, header["median_active"],
                       header["projection_active"], arrays["densify.grad_accum"],
                       arrays["densify.grad_count"], header["rng_state"])
    config = TrainConfig.from_text(header["config"])
    return Checkpoint(cloud, env, state, config)


def save_checkpoint(path, ck: Checkpoint) -> None:
    atomic_write_bytes(path, to_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    ck = from_bytes(path.read_bytes(), str(path))
    ck.state.check_consistent(ck.cloud)
    return ck
