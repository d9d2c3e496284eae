"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"TIM1" | u32 format_version | section*

    section = u64 byte_length | payload

Sections in order: header JSON (utf-8), params, EMA params, first optimizer
moment, second optimizer moment.  Array payloads are raw little-endian
floats of the network dtype (float32 unless the network runs in float64).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .network import NetworkConfig, layout
from .transport import TransportSpec

MAGIC = b"TIM1"
FORMAT_VERSION = 1
ARRAY_SECTIONS = ("params", "ema", "opt_m", "opt_v")


class CheckpointError(ValueError):
    """Unreadable, foreign or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    spec: TransportSpec
    net_cfg: NetworkConfig
    train_cfg: dict
    params: np.ndarray
    ema: np.ndarray
    opt_m: np.ndarray
    opt_v: np.ndarray
    rng_state: dict
    step: int
    data_stats: dict = field(default_factory=dict)
    run_config: str = ""

    def header(self):
        return {
            "format_version": FORMAT_VERSION,
            "transport": self.spec.to_dict(),
            "network": self.net_cfg.to_dict(),
            "layout": layout(self.net_cfg).to_list(),
            "train": self.train_cfg,
            "rng_state": self.rng_state,
            "step": int(self.step),
            "data_stats": self.data_stats,
            "run_config": self.run_config,
        }


def _frame(payload: bytes) -> bytes:
    return struct.pack("<Q", len(payload)) + payload


def save(path, ckpt: Checkpoint):
    dtype = np.dtype(ckpt.net_cfg.dtype).newbyteorder("<")
    size = layout(ckpt.net_cfg).size
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), _frame(json.dumps(ckpt.header(), sort_keys=True).encode())]
    for name in ARRAY_SECTIONS:
        arr = np.asarray(getattr(ckpt, name))
        if arr.shape != (size,):
            raise CheckpointError(f"{name}: expected {size} entries, got shape {arr.shape}")
        parts.append(_frame(arr.astype(dtype).tobytes()))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def _read_sections(blob: bytes):
    pos, out = 8, []
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise CheckpointError("truncated section header")
        (n,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if pos + n > len(blob):
            raise CheckpointError("truncated section payload")
        out.append(blob[pos:pos + n])
        pos += n
    return out


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a transition-model checkpoint (bad magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")
    sections = _read_sections(blob)
    if len(sections) != 1 + len(ARRAY_SECTIONS):
        raise CheckpointError(f"{path}: expected {1 + len(ARRAY_SECTIONS)} sections, found {len(sections)}")
    head = json.loads(sections[0].decode())
    spec = TransportSpec.from_dict(head["transport"])
    net_cfg = NetworkConfig(**head["network"])
    lay = layout(net_cfg)
    if lay.to_list() != head["layout"]:
        raise CheckpointError(f"{path}: parameter layout does not match the network config")
    dtype = np.dtype(net_cfg.dtype).newbyteorder("<")
    arrays = {}
    for name, raw in zip(ARRAY_SECTIONS, sections[1:]):
        arr = np.frombuffer(raw, dtype=dtype)
        if arr.size != lay.size:
            raise CheckpointError(f"{path}: section {name} holds {arr.size} values, layout needs {lay.size}")
        arrays[name] = arr.astype(net_cfg.dtype)
    return Checkpoint(spec=spec, net_cfg=net_cfg, train_cfg=head["train"], rng_state=head["rng_state"],
                      step=head["step"], data_stats=head["data_stats"], run_config=head["run_config"], **arrays)
