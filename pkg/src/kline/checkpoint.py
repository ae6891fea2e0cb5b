"""Binary checkpoint format for tokenizer and autoregressive models.

Layout (all integers little-endian, all floats float64 little-endian,
C-order):

    bytes 0..3   magic b"KRNS"
    u32          format version (currently 1)
    u32          config block length, then that many UTF-8 bytes
    u32          parameter count
    per param:   u16 name length, name bytes, u8 ndim, ndim * u64 dims,
                 payload of prod(dims) float64 values
    bytes -32..  sha256 digest of everything before it

The config block is line-oriented ``key = repr(value)`` text: the model
``kind`` first, then the config fields sorted by name.  Values are parsed
back with ast.literal_eval, so the block is canonical and the whole file
round-trips byte-identically through load/save.
"""

from __future__ import annotations

import ast
import hashlib
import io
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .armodel import ARConfig, ARModel
from .errors import DataError
from .tensor import Tensor
from .tokenizer import TokenizerConfig, TokenizerModel

__all__ = ["MAGIC", "FORMAT_VERSION", "save_checkpoint", "load_checkpoint", "checkpoint_kind"]

MAGIC = b"KRNS"
FORMAT_VERSION = 1
_DIGEST_SIZE = 32

_KINDS = {"tokenizer": (TokenizerConfig, TokenizerModel), "ar": (ARConfig, ARModel)}


def _kind_of(model: TokenizerModel | ARModel) -> str:
    if isinstance(model, TokenizerModel):
        return "tokenizer"
    if isinstance(model, ARModel):
        return "ar"
    raise DataError(f"cannot checkpoint object of type {type(model).__name__}")


def _config_block(kind: str, cfg) -> bytes:
    lines = [f"kind = {kind!r}"]
    for key in sorted(asdict(cfg)):
        lines.append(f"{key} = {getattr(cfg, key)!r}")
    return "\n".join(lines).encode("utf-8")


def _parse_config_block(blob: bytes) -> tuple[str, dict]:
    fields: dict = {}
    kind = None
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition(" = ")
        try:
            value = ast.literal_eval(raw)
        except (SyntaxError, ValueError) as exc:
            raise DataError(f"malformed checkpoint config line: {line!r}") from exc
        if key == "kind":
            kind = value
        else:
            fields[key] = value
    if kind not in _KINDS:
        raise DataError(f"unknown checkpoint kind: {kind!r}")
    return kind, fields


def save_checkpoint(path: str | Path, model: TokenizerModel | ARModel) -> None:
    kind = _kind_of(model)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    config = _config_block(kind, model.cfg)
    buf.write(struct.pack("<I", len(config)))
    buf.write(config)
    names = sorted(model.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise DataError(f"parameter name too long: {name!r}")
        # asarray keeps 0-d shapes; ascontiguousarray would promote them to (1,)
        arr = np.asarray(model.params[name].data, dtype="<f8", order="C")
        if arr.ndim > 0xFF:
            raise DataError(f"parameter {name!r} has too many dimensions: {arr.ndim}")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(arr.tobytes(order="C"))
    body = buf.getvalue()
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError("truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path: str | Path) -> TokenizerModel | ARModel:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 + _DIGEST_SIZE:
        raise DataError(f"checkpoint too small: {path}")
    body, digest = raw[:-_DIGEST_SIZE], raw[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise DataError(f"checkpoint digest mismatch (corrupt file): {path}")
    reader = _Reader(body)
    if reader.take(len(MAGIC)) != MAGIC:
        raise DataError(f"not a model checkpoint (bad magic): {path}")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    kind, fields = _parse_config_block(reader.take(reader.u32()))
    cfg_cls, model_cls = _KINDS[kind]
    cfg = cfg_cls(**fields)
    params: dict[str, Tensor] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u16()).decode("utf-8")
        shape = tuple(reader.u64() for _ in range(reader.u8()))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = reader.take(count * 8)
        arr = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = Tensor(arr, requires_grad=True)
    if reader.pos != len(body):
        raise DataError(f"trailing bytes after parameter table: {path}")
    return model_cls(cfg, params)


def checkpoint_kind(path: str | Path) -> str:
    """Read just enough of the file to report what model it holds."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 + _DIGEST_SIZE:
        raise DataError(f"checkpoint too small: {path}")
    reader = _Reader(raw[:-_DIGEST_SIZE])
    if reader.take(len(MAGIC)) != MAGIC:
        raise DataError(f"not a model checkpoint (bad magic): {path}")
    reader.u32()
    kind, _ = _parse_config_block(reader.take(reader.u32()))
    return kind
