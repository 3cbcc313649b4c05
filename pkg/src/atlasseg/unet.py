"""U-Net that maps a single-channel volume to a 3-channel displacement field.

Four resolution levels: an initial feature-extraction convolution, three
encoder levels (two conv+act each, then 2x max-pool), a two-conv bottleneck,
and three decoder levels (trilinear x2 upsample, skip concat, two conv+act),
closed by a final convolution to 3 channels interpreted as a displacement in
voxels. The final convolution is zero-initialized so an untrained network
produces the identity warp.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UsageError
from .graph import Graph, Node, ParamStore

CHECKPOINT_MAGIC = b"DLSC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    dims: tuple[int, int, int] = (64, 64, 64)
    base_channels: int = 16
    levels: int = 4
    leaky_slope: float = 0.2
    out_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        div = 2 ** (self.levels - 1)
        if any(d % div or d < div for d in self.dims):
            raise UsageError(f"dims {self.dims} must be divisible by {div}")
        if self.base_channels < 1:
            raise UsageError("base_channels must be >= 1")
        if self.out_channels != 3:
            raise UsageError("the displacement head must have 3 output channels")

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "base_channels": self.base_channels,
            "levels": self.levels,
            "leaky_slope": self.leaky_slope,
            "out_channels": self.out_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        known = {"dims", "base_channels", "levels", "leaky_slope", "out_channels"}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown unet config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "dims" in kwargs:
            kwargs["dims"] = tuple(kwargs["dims"])
        return cls(**kwargs)


def _layer_specs(cfg: UNetConfig) -> list[tuple[str, int, int]]:
    """(name, in_channels, out_channels) for every convolution, in order."""
    width = [cfg.base_channels * (2 ** l) for l in range(cfg.levels)]
    specs = [("init", 1, width[0])]
    for l in range(cfg.levels - 1):
        cin = width[0] if l == 0 else width[l - 1]
        specs.append((f"enc{l}a", cin, width[l]))
        specs.append((f"enc{l}b", width[l], width[l]))
    specs.append(("bota", width[cfg.levels - 2], width[cfg.levels - 1]))
    specs.append(("botb", width[cfg.levels - 1], width[cfg.levels - 1]))
    for l in reversed(range(cfg.levels - 1)):
        specs.append((f"dec{l}a", width[l + 1] + width[l], width[l]))
        specs.append((f"dec{l}b", width[l], width[l]))
    specs.append(("final", width[0], cfg.out_channels))
    return specs


def param_shapes(cfg: UNetConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    for name, cin, cout in _layer_specs(cfg):
        shapes[f"{name}.w"] = (cout, cin, 3, 3, 3)
        shapes[f"{name}.b"] = (cout,)
    return shapes


def init_params(cfg: UNetConfig, seed: int) -> ParamStore:
    """Fan-in scaled uniform weights, zero biases, zeroed final layer.

    Weights draw from U(-sqrt(3/fan_in), sqrt(3/fan_in)), giving per-block
    variance 1/fan_in with fan_in = in_channels * 27. Deterministic in seed.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParamStore()
    for name, shape in param_shapes(cfg).items():
        if name.startswith("final.") or name.endswith(".b"):
            store.add(name, np.zeros(shape))
        else:
            fan_in = shape[1] * 27
            bound = np.sqrt(3.0 / fan_in)
            store.add(name, rng.uniform(-bound, bound, size=shape))
    return store


def build_unet(cfg: UNetConfig, store: ParamStore, graph: Graph | None = None):
    """Assemble the network; returns (graph, image input node, field node)."""
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in store.blocks:
            raise UsageError(f"parameter store is missing block {name!r}")
        if store.blocks[name].shape != shape:
            raise UsageError(
                f"block {name!r} has shape {store.blocks[name].shape}, expected {shape}")

    g = graph if graph is not None else Graph()
    x = g.input("image", (1, *cfg.dims))

    def conv(h: Node, name: str) -> Node:
        return g.bias_add(g.conv3d(h, g.param(store, f"{name}.w")), g.param(store, f"{name}.b"))

    def conv_act(h: Node, name: str) -> Node:
        return g.leaky_relu(conv(h, name), cfg.leaky_slope)

    h = conv_act(x, "init")
    skips = []
    for l in range(cfg.levels - 1):
        h = conv_act(h, f"enc{l}a")
        h = conv_act(h, f"enc{l}b")
        skips.append(h)
        h = g.maxpool2(h)
    h = conv_act(h, "bota")
    h = conv_act(h, "botb")
    for l in reversed(range(cfg.levels - 1)):
        h = g.concat(g.upsample2(h), skips[l])
        h = conv_act(h, f"dec{l}a")
        h = conv_act(h, f"dec{l}b")
    field = conv(h, "final")
    return g, x, field


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointCorruptError(DataError):
    """File is not a readable checkpoint (bad magic, truncation, bad JSON)."""


class CheckpointVersionError(DataError):
    """Checkpoint format version is not supported."""


class CheckpointShapeError(DataError):
    """Stored blocks do not match the stored network configuration."""


@dataclass
class Checkpoint:
    config: UNetConfig
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] | None = None
    version: int = CHECKPOINT_VERSION


def checkpoint_from_store(cfg: UNetConfig, store: ParamStore, metadata=None,
                          include_optimizer: bool = False) -> Checkpoint:
    params = {name: store.blocks[name].copy() for name in store.names()}
    opt = None
    if include_optimizer:
        opt = {}
        for name in store.names():
            opt[f"m.{name}"] = store.m[name].copy()
            opt[f"v.{name}"] = store.v[name].copy()
    return Checkpoint(cfg, params, dict(metadata or {}), opt)


def store_from_checkpoint(ckpt: Checkpoint) -> ParamStore:
    store = ParamStore()
    for name, block in ckpt.params.items():
        store.add(name, block)
    if ckpt.optimizer:
        for name in store.names():
            if f"m.{name}" in ckpt.optimizer:
                store.m[name][...] = ckpt.optimizer[f"m.{name}"]
                store.v[name][...] = ckpt.optimizer[f"v.{name}"]
    return store


def _write_block(fh, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Little-endian binary: magic, u32 version, length-prefixed JSON header,
    then per-block (u32 name length, name, u32 rank, u32 dims, f32 data)."""
    header = {
        "config": ckpt.config.to_dict(),
        "metadata": ckpt.metadata,
        "has_optimizer": bool(ckpt.optimizer),
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for name in ckpt.params:
            _write_block(fh, name, ckpt.params[name])
        for name in sorted(ckpt.optimizer or {}):
            _write_block(fh, f"opt.{name}", ckpt.optimizer[name])


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointCorruptError(f"truncated checkpoint: wanted {count} bytes, got {len(data)}")
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointCorruptError(f"bad magic {magic!r}")
        version = struct.unpack("<I", _read_exact(fh, 4))[0]
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"unsupported checkpoint version {version}")
        header_len = struct.unpack("<I", _read_exact(fh, 4))[0]
        try:
            header = json.loads(_read_exact(fh, header_len).decode("utf-8"))
            cfg = UNetConfig.from_dict(header["config"])
        except (ValueError, KeyError, UsageError) as exc:
            raise CheckpointCorruptError(f"unreadable checkpoint header: {exc}") from exc

        params: dict[str, np.ndarray] = {}
        optimizer: dict[str, np.ndarray] = {}
        while True:
            lead = fh.read(4)
            if not lead:
                break
            if len(lead) != 4:
                raise CheckpointCorruptError("truncated block header")
            (name_len,) = struct.unpack("<I", lead)
            name = _read_exact(fh, name_len).decode("utf-8")
            rank = struct.unpack("<I", _read_exact(fh, 4))[0]
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            count = int(np.prod(shape)) if rank else 1
            raw = _read_exact(fh, 4 * count)
            block = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
            if name.startswith("opt."):
                optimizer[name[4:]] = block
            else:
                params[name] = block

    expected = param_shapes(cfg)
    if set(params) != set(expected):
        raise CheckpointShapeError(
            f"blocks {sorted(set(params) ^ set(expected))} do not match the stored config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointShapeError(
                f"block {name!r} has shape {params[name].shape}, expected {shape}")
    return Checkpoint(cfg, params, header.get("metadata", {}),
                      optimizer or None, version)
