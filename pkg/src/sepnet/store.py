"""Compact binary model files and size accounting.

Layout (all integers little-endian)::

    b"SEPN"  u16 version
    u32 descriptor length, descriptor (UTF-8 JSON of the layer graph)
    u32 record count, then per record:
        u16 id length, id (UTF-8), u8 tag, u8 ndim, ndim x u32 dims, payload

    tag 0 F32   payload = prod(dims) float32
    tag 1 BIN1  u8 scale axes (1 = per filter, 2 = per k x k kernel),
                per output filter ceil(prod(dims[1:]) / 8) bytes of sign bits
                (LSB first, 1 = +1), then one float32 scale per filter/kernel
    tag 2 Q8    u8 flags (bit 0 = per-channel), float32 scale(s), int8 codes

Records cover parameter slots first, then batch-norm running statistics
(always F32).
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .compress import BLOCK_ROLES, BinaryPattern, Quant8Block, binarize_network, quantize8
from .graph import Network

MAGIC = b"SEPN"
VERSION = 1
TAGS = {"F32": 0, "BIN1": 1, "Q8": 2}
_TAG_NAMES = {v: k for k, v in TAGS.items()}


class ModelFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


def _record_header(key: str, tag: int, shape) -> bytes:
    kid = key.encode("utf-8")
    return (struct.pack("<H", len(kid)) + kid + struct.pack("<BB", tag, len(shape))
            + struct.pack(f"<{len(shape)}I", *shape))


def _encode_slot(key: str, slot) -> bytes:
    shape = slot.value.shape
    if slot.encoding == "F32":
        return _record_header(key, 0, shape) + np.ascontiguousarray(slot.value, "<f4").tobytes()
    if slot.encoding == "BIN1":
        pat: BinaryPattern = slot.pattern
        bits = np.packbits(pat.signs.reshape(shape[0], -1), axis=1, bitorder="little")
        return (_record_header(key, 1, shape) + struct.pack("<B", pat.alpha.ndim)
                + bits.tobytes() + np.ascontiguousarray(pat.alpha, "<f4").tobytes())
    if slot.encoding == "Q8":
        q: Quant8Block = slot.quant
        return (_record_header(key, 2, shape) + struct.pack("<B", int(q.per_channel))
                + np.ascontiguousarray(q.scale, "<f4").tobytes() + q.codes.astype(np.int8).tobytes())
    raise ValueError(f"{key}: unknown encoding {slot.encoding!r}")


def _encode_buffer(key: str, arr: np.ndarray) -> bytes:
    return _record_header(key, 0, arr.shape) + np.ascontiguousarray(arr, "<f4").tobytes()


def encode_records(net: Network) -> list[tuple[str, bytes]]:
    recs = [(k, _encode_slot(k, s)) for k, s in net.params.items()]
    recs += [(k, _encode_buffer(k, b)) for k, b in net.buffers.items()]
    return recs


def _descriptor_bytes(net: Network) -> bytes:
    return json.dumps(net.describe(), separators=(",", ":"), sort_keys=True).encode("utf-8")


def to_bytes(net: Network) -> bytes:
    net.validate()
    desc = _descriptor_bytes(net)
    recs = encode_records(net)
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(desc)), desc,
             struct.pack("<I", len(recs))]
    parts += [r for _, r in recs]
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError(f"truncated file while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(data: bytes) -> Network:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise ModelFormatError("bad magic, not a SEPN model file", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version}", 4)
    (dlen,) = r.unpack("<I", "descriptor length")
    at = r.pos
    try:
        desc = json.loads(r.take(dlen, "descriptor").decode("utf-8"))
        net = Network.from_description(desc)
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"invalid descriptor: {exc}", at) from exc
    (count,) = r.unpack("<I", "record count")
    seen = set()
    for _ in range(count):
        start = r.pos
        (klen,) = r.unpack("<H", "record id length")
        key = r.take(klen, "record id").decode("utf-8")
        tag, ndim = r.unpack("<BB", "record tag")
        shape = r.unpack(f"<{ndim}I", "record shape")
        size = int(np.prod(shape)) if shape else 1
        if tag == 0:
            arr = np.frombuffer(r.take(4 * size, f"{key} payload"), "<f4").reshape(shape)
            if key in net.buffers:
                net.buffers[key] = arr.astype(np.float32)
                seen.add(key)
                continue
            slot = _slot_for(net, key, shape, start)
            slot.encoding, slot.pattern, slot.quant, slot.frozen_pattern = "F32", None, None, False
            slot.value = arr.astype(np.float32)
        elif tag == 1:
            slot = _slot_for(net, key, shape, start)
            (lead,) = r.unpack("<B", f"{key} scale axes")
            per = int(np.prod(shape[1:]))
            nbytes = -(-per // 8)
            bits = np.frombuffer(r.take(shape[0] * nbytes, f"{key} sign bits"), np.uint8)
            signs = np.unpackbits(bits.reshape(shape[0], nbytes), axis=1, count=per,
                                  bitorder="little").astype(bool).reshape(shape)
            ashape = shape[:lead]
            nscale = int(np.prod(ashape)) if ashape else 1
            alpha = np.frombuffer(r.take(4 * nscale, f"{key} scales"), "<f4").reshape(ashape)
            slot.pattern = BinaryPattern(signs, alpha.astype(np.float32))
            slot.encoding, slot.quant, slot.frozen_pattern = "BIN1", None, True
            slot.value = slot.pattern.reconstruct().astype(np.float32)
        elif tag == 2:
            slot = _slot_for(net, key, shape, start)
            (flags,) = r.unpack("<B", f"{key} flags")
            nscale = shape[0] if flags & 1 else 1
            scale = np.frombuffer(r.take(4 * nscale, f"{key} scales"), "<f4").astype(np.float32)
            if not flags & 1:
                scale = scale.reshape(())
            codes = np.frombuffer(r.take(size, f"{key} codes"), np.int8).reshape(shape)
            slot.quant = Quant8Block(codes.copy(), scale)
            slot.encoding, slot.pattern, slot.frozen_pattern = "Q8", None, False
            slot.value = slot.quant.dequantize()
        else:
            raise ModelFormatError(f"unknown encoding tag {tag} for {key}", start)
        seen.add(key)
    missing = (set(net.params) | set(net.buffers)) - seen
    if missing:
        raise ModelFormatError(f"missing records: {sorted(missing)[:5]}", r.pos)
    if r.pos != len(data):
        raise ModelFormatError("trailing bytes after last record", r.pos)
    return net


def _slot_for(net, key, shape, offset):
    slot = net.params.get(key)
    if slot is None:
        raise ModelFormatError(f"record {key!r} does not match any parameter", offset)
    if tuple(slot.value.shape) != tuple(shape):
        raise ModelFormatError(f"record {key!r} has shape {shape}, expected {slot.value.shape}", offset)
    return slot


def save(net: Network, path) -> int:
    """Write ``net`` atomically; returns the number of bytes written."""
    data = to_bytes(net)
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".sepn-", dir=d)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(data)


def load(path) -> Network:
    with open(path, "rb") as f:
        return from_bytes(f.read())


def export_descriptor(net: Network, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(net.describe(), f, indent=2)
        f.write("\n")


def import_descriptor(path) -> Network:
    with open(path, encoding="utf-8") as f:
        return Network.from_description(json.load(f))


def to_full(net: Network) -> Network:
    """Copy with every slot re-encoded as plain F32 (values kept as-is)."""
    out = net.copy()
    for slot in out.params.values():
        slot.encoding, slot.pattern, slot.quant, slot.frozen_pattern = "F32", None, None, False
    return out


@dataclass
class SizeReport:
    rows: list[tuple[str, int, int, int]] = field(default_factory=list)  # node, R, B, BQ bytes
    totals: dict[str, int] = field(default_factory=dict)

    def to_tsv(self) -> str:
        lines = ["layer\tR\tB\tBQ"]
        lines += [f"{n}\t{r}\t{b}\t{q}" for n, r, b, q in self.rows]
        lines.append("TOTAL\t" + "\t".join(str(self.totals[k]) for k in ("R", "B", "BQ")))
        return "\n".join(lines) + "\n"


def size_report(net: Network, scope="k>1", roles=BLOCK_ROLES, granularity="filter",
                per_channel: bool = False) -> SizeReport:
    """File bytes per layer for raw (R), binarized (B) and binarized+8-bit (BQ) encodings.

    Totals are the exact lengths :func:`save` would write for each regime.
    """
    raw = to_full(net)
    binz, _ = binarize_network(raw, scope, roles, granularity)
    bq = quantize8(binz, per_channel)
    per = {}
    totals = {}
    for tag, variant in (("R", raw), ("B", binz), ("BQ", bq)):
        totals[tag] = len(to_bytes(variant))
        for key, rec in encode_records(variant):
            owner = key.rsplit(".", 1)[0]
            per.setdefault(owner, {"R": 0, "B": 0, "BQ": 0})[tag] += len(rec)
    rows = [(owner, d["R"], d["B"], d["BQ"]) for owner, d in per.items()]
    return SizeReport(rows, totals)
