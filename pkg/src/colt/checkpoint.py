"""Binary checkpoint container for tickets, parameter sets and masks.

Layout (all integers little-endian)::

    b"COLT" | version u16 | object kind u8 | record count u32
    per record: name length u16 | name (UTF-8) | tag u8 | rank u8 | dims u64 * rank | payload
    CRC32 u32 of every preceding byte

Record tags:

    0x01-0x04  current weights (conv, linear, bias, norm), float32 payload
    0x11-0x14  initial snapshot of the same, float32 payload (0x10 = kind unknown)
    +0x08      on either weight tag marks an output-layer tensor
    0x20/0x21  mask bits (ineligible / eligible), LSB-first, padded to a byte
    0x40       UTF-8 JSON metadata, rank 1, dims = byte length
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Union

import numpy as np

from .models import KINDS, ParameterSet
from .pruning import Mask, MaskEntry
from .tensor import Tensor
from .tickets import Ticket

MAGIC = b"COLT"
VERSION = 1
KIND_TICKET, KIND_PARAMS, KIND_MASK = 1, 2, 3

TAG_INITIAL = 0x10
TAG_HEAD = 0x08
TAG_MASK = 0x20
TAG_JSON = 0x40
META_NAME = "__meta__"


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CRCError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def _kind_code(kind: str | None) -> int:
    return KINDS.index(kind) + 1 if kind in KINDS else 0


def _record(name: str, tag: int, dims: tuple[int, ...], payload: bytes) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, len(dims))
    head += b"".join(struct.pack("<Q", d) for d in dims)
    return head + payload


def _f32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _json_record(meta: dict) -> bytes:
    payload = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _record(META_NAME, TAG_JSON, (len(payload),), payload)


def _mask_records(mask: Mask) -> list[bytes]:
    return [_record(n, TAG_MASK | int(e.eligible), e.shape, np.asarray(e.bits, dtype=np.uint8).tobytes())
            for n, e in mask.entries.items()]


def _container(kind: int, records: list[bytes]) -> bytes:
    body = MAGIC + struct.pack("<HBI", VERSION, kind, len(records)) + b"".join(records)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if hasattr(value, "__dataclass_fields__"):
        return _jsonable(vars(value))
    return value


def dumps(obj: Union[Ticket, ParameterSet, Mask]) -> bytes:
    if isinstance(obj, Ticket):
        records = _mask_records(obj.mask)
        records += [_record(n, TAG_INITIAL, a.shape, _f32(a)) for n, a in obj.initial.items()]
        records.append(_json_record(_jsonable(obj.provenance)))
        return _container(KIND_TICKET, records)
    if isinstance(obj, ParameterSet):
        records = []
        for n, t in obj.items():
            tag = _kind_code(obj.kinds[n]) | (TAG_HEAD if obj.is_head(n) else 0)
            records.append(_record(n, tag, t.shape, _f32(t.data)))
            records.append(_record(n, tag | TAG_INITIAL, t.shape, _f32(obj.initial[n])))
        return _container(KIND_PARAMS, records)
    if isinstance(obj, Mask):
        return _container(KIND_MASK, _mask_records(obj))
    raise TypeError(f"cannot checkpoint {type(obj).__name__}")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 15:
        raise TruncatedError(f"checkpoint truncated: {len(buf)} bytes")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(body)
    r.take(4, "magic")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this reader handles {VERSION}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CRCError("checkpoint CRC32 mismatch: file is corrupted")
    kind, count = r.unpack("<BI", "header")

    masks: dict[str, MaskEntry] = {}
    weights: dict[str, tuple[int, np.ndarray]] = {}
    initial: dict[str, tuple[int, np.ndarray]] = {}
    meta: dict = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        tag, rank = r.unpack("<BB", f"tag of {name!r}")
        dims = tuple(r.unpack(f"<{rank}Q", f"dims of {name!r}")) if rank else ()
        n = int(np.prod(dims, dtype=np.int64))
        if tag == TAG_JSON:
            meta = json.loads(r.take(dims[0], "metadata").decode("utf-8"))
        elif tag & 0xF0 == TAG_MASK:
            bits = np.frombuffer(r.take((n + 7) // 8, f"mask {name!r}"), dtype=np.uint8).copy()
            masks[name] = MaskEntry(dims, bits, bool(tag & 1))
        elif tag & 0xE0 == 0:
            arr = np.frombuffer(r.take(4 * n, f"tensor {name!r}"), dtype="<f4").astype(np.float32).reshape(dims)
            (initial if tag & TAG_INITIAL else weights)[name] = (tag & 0x0F, arr)
        else:
            raise CheckpointError(f"unknown record tag 0x{tag:02X} for {name!r}")
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after the last record")

    if kind == KIND_MASK:
        return Mask(masks)
    if kind == KIND_TICKET:
        return Ticket(Mask(masks), {n: a for n, (_, a) in initial.items()}, meta)
    if kind == KIND_PARAMS:
        tensors, kinds, head, init = {}, {}, [], {}
        for n, (code, arr) in weights.items():
            tensors[n] = Tensor(arr, requires_grad=True, name=n)
            kinds[n] = KINDS[(code & 0x07) - 1]
            if code & TAG_HEAD:
                head.append(n)
            init[n] = initial[n][1]
        return ParameterSet(tensors, kinds, tuple(head), init)
    raise CheckpointError(f"unknown object kind {kind}")


def save_checkpoint(obj, path) -> None:
    Path(path).write_bytes(dumps(obj))


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
