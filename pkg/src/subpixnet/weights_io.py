"""Binary weights and checkpoint files.

Layout (all little-endian):

    magic 'SPXC' | version u16 | name_len u16 + utf-8 name |
    width_mult numerator u32 + denominator u32 | tensor_count u32 |
    per tensor: name_len u16 + utf-8 name, rank u32, dims u32 x rank,
                float32 payload

A checkpoint is a weights file followed by an 'OPT1' section holding the
optimizer moment buffers and step counter in the same tensor encoding.
"""

from __future__ import annotations

import os
import struct
from fractions import Fraction
from pathlib import Path

import numpy as np

from .networks import NetworkInstance, TopologySpec, build_network, topology
from .tensor import Tensor

__all__ = [
    "MAGIC",
    "VERSION",
    "WeightsFormatError",
    "save_weights",
    "load_weights",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"SPXC"
OPT_MAGIC = b"OPT1"
VERSION = 1


class WeightsFormatError(ValueError):
    """Raised for malformed weights/checkpoint files."""


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"string too long for format: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    dims = arr.shape
    head = _pack_str(name) + struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise WeightsFormatError(f"{self.path}: truncated file (wanted {n} more bytes)")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.string()
        rank = self.u32()
        if rank > 8:
            raise WeightsFormatError(f"{self.path}: implausible tensor rank {rank}")
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        if count > 500_000_000:
            raise WeightsFormatError(f"{self.path}: implausible tensor size {dims}")
        data = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(dims)
        return name, data.astype(np.float32)

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.raw)


def _weights_blob(net: NetworkInstance) -> bytes:
    t = net.topology
    wm = t.encoder.width_mult
    parts = [
        MAGIC,
        struct.pack("<H", VERSION),
        _pack_str(t.name),
        struct.pack("<II", wm.numerator, wm.denominator),
        struct.pack("<I", len(net.params)),
    ]
    for name, tensor in net.params.items():
        parts.append(_pack_tensor(name, tensor.data))
    return b"".join(parts)


def save_weights(net: NetworkInstance, path) -> None:
    """Write the network's parameters atomically (write to temp, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_weights_blob(net))
    os.replace(tmp, path)


def _read_header(r: _Reader) -> tuple[str, Fraction, dict[str, np.ndarray]]:
    if r.take(4) != MAGIC:
        raise WeightsFormatError(f"{r.path}: bad magic, not a weights file")
    version = r.u16()
    if version != VERSION:
        raise WeightsFormatError(f"{r.path}: unsupported format version {version}")
    name = r.string()
    num, den = r.u32(), r.u32()
    if den == 0:
        raise WeightsFormatError(f"{r.path}: zero width_mult denominator")
    count = r.u32()
    tensors = {}
    for _ in range(count):
        tname, data = r.tensor()
        tensors[tname] = data
    return name, Fraction(num, den), tensors


def _infer_topology(name: str, wm: Fraction, tensors: dict[str, np.ndarray]) -> TopologySpec:
    """Reconstruct the topology from the stored name plus tensor shapes."""
    stages = 0
    while f"encoder.conv{stages + 1}.weight" in tensors:
        stages += 1
    if stages == 0:
        raise WeightsFormatError(f"no encoder tensors found for topology {name!r}")
    kwargs: dict = {"width_mult": wm, "num_stages": stages}
    if "encoder.redir.weight" in tensors:
        redir_out = tensors["encoder.redir.weight"].shape[0]
        merged_in = tensors["encoder.conv3_1.weight"].shape[1]
        kwargs["max_disp"] = merged_in - redir_out - 1
    sp_names = [n for n in tensors if ".conv2.weight" in n and n.startswith("decoder.sp")]
    if sp_names:
        hidden_scaled = tensors[sp_names[0]].shape[0]
        kwargs["sp_hidden"] = int(round(hidden_scaled / float(wm)))
    return topology(name, **kwargs)


def _apply_tensors(net: NetworkInstance, tensors: dict[str, np.ndarray], path) -> None:
    expected = set(net.params)
    got = set(tensors)
    if expected != got:
        missing = sorted(expected - got)[:3]
        extra = sorted(got - expected)[:3]
        raise WeightsFormatError(
            f"{path}: tensor set does not match topology {net.topology.name!r} "
            f"(missing {missing}, unexpected {extra})"
        )
    for name, data in tensors.items():
        p = net.params[name]
        if p.data.shape != data.shape:
            raise WeightsFormatError(
                f"{path}: shape mismatch for {name}: file {data.shape} vs topology {p.data.shape}"
            )
        p.data = data.copy()


def load_weights(path, net: NetworkInstance | None = None) -> NetworkInstance:
    """Load a weights file; rebuilds the topology unless ``net`` is supplied."""
    r = _Reader(Path(path).read_bytes(), path)
    name, wm, tensors = _read_header(r)
    if net is None:
        net = build_network(_infer_topology(name, wm, tensors), rng=0)
    _apply_tensors(net, tensors, path)
    return net


def save_checkpoint(net: NetworkInstance, state, path) -> None:
    """Weights plus optimizer state, atomically."""
    parts = [_weights_blob(net), OPT_MAGIC]
    entries = (
        [("step", np.full((1, 1, 1, 1), state.step, dtype=np.float32))]
        + [(f"m.{k}", v) for k, v in state.m.items()]
        + [(f"v.{k}", v) for k, v in state.v.items()]
    )
    parts.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        parts.append(_pack_tensor(name, arr))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Load a checkpoint into a rebuilt network plus its optimizer state."""
    from .training import OptimizerState

    r = _Reader(Path(path).read_bytes(), path)
    name, wm, tensors = _read_header(r)
    net = build_network(_infer_topology(name, wm, tensors), rng=0)
    _apply_tensors(net, tensors, path)
    if r.take(4) != OPT_MAGIC:
        raise WeightsFormatError(f"{path}: missing optimizer section")
    state = OptimizerState()
    for _ in range(r.u32()):
        tname, data = r.tensor()
        if tname == "step":
            state.step = int(data.reshape(())[()])
        elif tname.startswith("m."):
            state.m[tname[2:]] = data
        elif tname.startswith("v."):
            state.v[tname[2:]] = data
        else:
            raise WeightsFormatError(f"{path}: unknown optimizer tensor {tname!r}")
    if not r.exhausted:
        raise WeightsFormatError(f"{path}: trailing bytes after optimizer section")
    return net, state
