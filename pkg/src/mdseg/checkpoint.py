"""Binary model snapshots.

Layout (little-endian):

    magic "MDFC" | u32 version | u8 variant | u16 num_domains | u8 preset
    u16 n_heads | u16 trunk_len | u16 head_len
    trunk layer table | head layer table (shared by all heads)
    float32 blobs: trunk weights+bias in order, then each head's
    u32 CRC32 over everything above

Layer table entry: u8 kind | u16 in_ch | u16 out_ch | u16 kh | u16 kw
| u16 stride | u16 padding.  Weights are stored as raw float32 in array
order, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError, FilesystemError
from .model import ARCH_PRESETS, Layer, ModelParams, VARIANTS
from .nn_core import LAYER_KINDS, LayerSpec

MAGIC = b"MDFC"
VERSION = 1

_KIND_CODES = {kind: i for i, kind in enumerate(sorted(LAYER_KINDS))}
_KINDS_BY_CODE = {i: kind for kind, i in _KIND_CODES.items()}
_VARIANT_CODES = {v: i for i, v in enumerate(VARIANTS)}
_VARIANTS_BY_CODE = {i: v for v, i in _VARIANT_CODES.items()}
_PRESET_CODES = {p: i for i, p in enumerate(sorted(ARCH_PRESETS))}
_PRESETS_BY_CODE = {i: p for p, i in _PRESET_CODES.items()}

_ENTRY = struct.Struct("<B6H")
_HEADER = struct.Struct("<4sIBHB3H")


def _pack_table(layers: list[Layer]) -> bytes:
    out = []
    for layer in layers:
        s = layer.spec
        out.append(_ENTRY.pack(_KIND_CODES[s.kind], s.in_channels, s.out_channels,
                               s.kernel_h, s.kernel_w, s.stride, s.padding))
    return b"".join(out)


def save_checkpoint(params: ModelParams, path) -> None:
    trunk_len = len(params.trunk)
    head_len = len(params.heads[0])
    for head in params.heads:
        if [l.spec for l in head] != [l.spec for l in params.heads[0]]:
            raise CheckpointError("heads disagree on layer structure")

    parts = [
        _HEADER.pack(MAGIC, VERSION, _VARIANT_CODES[params.variant],
                     params.num_domains, _PRESET_CODES[params.arch_preset],
                     len(params.heads), trunk_len, head_len),
        _pack_table(params.trunk),
        _pack_table(params.heads[0]),
    ]
    for layer in list(params.trunk) + [l for h in params.heads for l in h]:
        if layer.weights is None:
            continue
        if layer.weights.dtype != np.float32 or layer.bias.dtype != np.float32:
            raise CheckpointError(
                f"expected float32 parameters, got {layer.weights.dtype}")
        parts.append(np.ascontiguousarray(layer.weights).tobytes())
        parts.append(np.ascontiguousarray(layer.bias).tobytes())

    body = b"".join(parts)
    blob = body + struct.pack("<I", zlib.crc32(body))
    try:
        Path(path).write_bytes(blob)
    except OSError as e:
        raise FilesystemError(f"cannot write checkpoint {path}: {e}") from e


def _read_table(buf: bytes, offset: int, count: int) -> tuple[list[LayerSpec], int]:
    specs = []
    for _ in range(count):
        if offset + _ENTRY.size > len(buf):
            raise CheckpointError("truncated layer table", offset=offset)
        kind_code, cin, cout, kh, kw, stride, padding = _ENTRY.unpack_from(buf, offset)
        if kind_code not in _KINDS_BY_CODE:
            raise CheckpointError(f"unknown layer kind code {kind_code}",
                                  offset=offset)
        specs.append(LayerSpec(_KINDS_BY_CODE[kind_code], cin, cout, kh, kw,
                               stride, padding))
        offset += _ENTRY.size
    return specs, offset


def _read_layers(buf: bytes, offset: int, specs: list[LayerSpec]):
    layers = []
    for spec in specs:
        if not spec.has_weights:
            layers.append(Layer(spec))
            continue
        wshape = spec.weight_shape()
        wbytes = int(np.prod(wshape)) * 4
        bbytes = spec.out_channels * 4
        if offset + wbytes + bbytes > len(buf):
            raise CheckpointError("truncated parameter blob", offset=offset)
        weights = np.frombuffer(buf, np.dtype("<f4"), int(np.prod(wshape)),
                                offset).reshape(wshape).copy()
        offset += wbytes
        bias = np.frombuffer(buf, np.dtype("<f4"), spec.out_channels, offset).copy()
        offset += bbytes
        layers.append(Layer(spec, weights, bias))
    return layers, offset


def load_checkpoint(path) -> ModelParams:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise FilesystemError(f"cannot read checkpoint {path}: {e}") from e
    if len(buf) < _HEADER.size + 4:
        raise CheckpointError("file too short to hold a header", offset=len(buf))

    stored_crc = struct.unpack_from("<I", buf, len(buf) - 4)[0]
    actual_crc = zlib.crc32(buf[:-4])
    if stored_crc != actual_crc:
        raise CheckpointError(
            f"CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}",
            offset=len(buf) - 4)

    magic, version, variant_code, num_domains, preset_code, n_heads, \
        trunk_len, head_len = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", offset=4)
    if variant_code not in _VARIANTS_BY_CODE:
        raise CheckpointError(f"unknown variant code {variant_code}", offset=8)
    if preset_code not in _PRESETS_BY_CODE:
        raise CheckpointError(f"unknown preset code {preset_code}", offset=11)

    offset = _HEADER.size
    trunk_specs, offset = _read_table(buf, offset, trunk_len)
    head_specs, offset = _read_table(buf, offset, head_len)
    trunk, offset = _read_layers(buf, offset, trunk_specs)
    heads = []
    for _ in range(n_heads):
        head, offset = _read_layers(buf, offset, head_specs)
        heads.append(head)

    if offset != len(buf) - 4:
        raise CheckpointError(
            f"{len(buf) - 4 - offset} unexpected trailing bytes", offset=offset)

    return ModelParams(_VARIANTS_BY_CODE[variant_code], num_domains,
                       _PRESETS_BY_CODE[preset_code], trunk, heads)
