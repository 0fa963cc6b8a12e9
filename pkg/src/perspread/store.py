"""Bit-exact snapshot files for physical arrays and dedicated sketches.

Layout (little-endian)::

    offset  size  field
    0       4     magic b"PSRD"
    4       2     format version (1)
    6       1     kind: 0 = physical array, 1 = dedicated sketch
    7       1     register width h
    8       8     register count m
    16      8     period id (signed)
    24      8     seed-table digest (zeros for dedicated sketches)
    32      8     payload length in bytes, ceil(m*h/8)
    40      ...   payload: register i occupies bits [i*h, (i+1)*h) of the
                  payload, least-significant bit first within each byte
    ...     4     CRC-32 of the payload

A period manifest (JSON) lists the snapshots of one measurement run in
period order together with the seed table they were recorded under.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .hll import HllSketch
from .virtual import PhysicalRegisterArray, SeedTable

MAGIC = b"PSRD"
VERSION = 1
KIND_ARRAY = 0
KIND_SKETCH = 1
_HEADER = struct.Struct("<4sHBBQq8sQ")
_CRC = struct.Struct("<I")
HEADER_SIZE = _HEADER.size
NO_DIGEST = bytes(8)
MANIFEST_FORMAT = "perspread-manifest/1"


class SnapshotError(ValueError):
    pass


class FormatError(SnapshotError):
    pass


class VersionError(SnapshotError):
    pass


class TruncatedError(SnapshotError):
    pass


class ChecksumError(SnapshotError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SnapshotHeader:
    kind: int
    h: int
    m: int
    period_id: int
    digest: bytes
    payload_size: int


def pack_registers(registers: np.ndarray, h: int) -> bytes:
    regs = np.asarray(registers, dtype=np.uint8)
    if regs.size and int(regs.max()) >> h:
        raise ValueError(f"register value does not fit in {h} bits")
    bits = ((regs[:, None] >> np.arange(h, dtype=np.uint8)) & 1).astype(np.uint8).ravel()
    return np.packbits(bits, bitorder="little").tobytes()


def unpack_registers(payload: bytes, m: int, h: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")[: m * h]
    weights = (1 << np.arange(h)).astype(np.uint16)
    return (bits.reshape(m, h).astype(np.uint16) @ weights).astype(np.uint8)


def payload_size(m: int, h: int) -> int:
    return (m * h + 7) // 8


def encode(obj, digest: bytes = NO_DIGEST) -> bytes:
    if isinstance(obj, PhysicalRegisterArray):
        kind, m, period = KIND_ARRAY, obj.m, obj.period_id
    elif isinstance(obj, HllSketch):
        kind, m, period, digest = KIND_SKETCH, obj.s, 0, NO_DIGEST
    else:
        raise TypeError(f"cannot snapshot {type(obj).__name__}")
    if len(digest) != 8:
        raise ValueError("seed digest must be 8 bytes")
    payload = pack_registers(obj.registers, obj.h)
    header = _HEADER.pack(MAGIC, VERSION, kind, obj.h, m, period, digest, len(payload))
    return header + payload + _CRC.pack(zlib.crc32(payload))


def decode_header(data: bytes) -> SnapshotHeader:
    if len(data) < HEADER_SIZE:
        raise TruncatedError(f"snapshot header needs {HEADER_SIZE} bytes, got {len(data)}")
    magic, version, kind, h, m, period, digest, size = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported snapshot version {version} (expected {VERSION})")
    if kind not in (KIND_ARRAY, KIND_SKETCH) or not 1 <= h <= 8:
        raise FormatError(f"bad header fields kind={kind} h={h}")
    if size != payload_size(m, h):
        raise FormatError(f"payload length {size} inconsistent with m={m}, h={h}")
    return SnapshotHeader(kind, h, m, period, digest, size)


def decode(data: bytes):
    header = decode_header(data)
    end = HEADER_SIZE + header.payload_size
    if len(data) < end + _CRC.size:
        raise TruncatedError(f"snapshot truncated: {len(data)} of {end + _CRC.size} bytes")
    payload = data[HEADER_SIZE:end]
    (crc,) = _CRC.unpack_from(data, end)
    if zlib.crc32(payload) != crc:
        raise ChecksumError("payload checksum mismatch")
    regs = unpack_registers(payload, header.m, header.h)
    if header.kind == KIND_ARRAY:
        return PhysicalRegisterArray(header.m, header.h, header.period_id, regs)
    return HllSketch(header.m, header.h, regs)


def save(obj, path, seeds: SeedTable | None = None) -> SnapshotHeader:
    data = encode(obj, seeds.digest() if seeds is not None else NO_DIGEST)
    Path(path).write_bytes(data)
    return decode_header(data)


def load(path):
    return decode(Path(path).read_bytes())


def read_header(path) -> SnapshotHeader:
    with open(path, "rb") as fh:
        return decode_header(fh.read(HEADER_SIZE))


@dataclass
class Manifest:
    """Ordered period snapshots sharing ``m``, ``h`` and one seed table."""

    paths: list
    period_ids: list
    m: int
    h: int
    seeds: SeedTable

    @property
    def t(self) -> int:
        return len(self.paths)

    def load_arrays(self) -> list:
        return [load(p) for p in self.paths]

    def to_json(self, base: Path | None = None) -> str:
        def rel(p):
            p = Path(p).resolve()
            return str(p.relative_to(base)) if base is not None and p.is_relative_to(base) else str(p)

        return json.dumps(
            {
                "format": MANIFEST_FORMAT,
                "m": self.m,
                "h": self.h,
                "s": self.seeds.s,
                "seed_digest": self.seeds.digest().hex(),
                "seeds": [f"{int(v):016x}" for v in self.seeds.seeds],
                "periods": [{"period_id": pid, "path": rel(p)} for pid, p in zip(self.period_ids, self.paths)],
            },
            indent=1,
        )


def manifest(paths: Sequence, seeds: SeedTable | None = None) -> Manifest:
    """Validate snapshots for a t-way query and order them by period."""
    if not paths:
        raise ManifestError("no snapshots given")
    headers = [(read_header(p), Path(p)) for p in paths]
    first = headers[0][0]
    for hdr, p in headers:
        if hdr.kind != KIND_ARRAY:
            raise ManifestError(f"{p}: not a physical array snapshot")
        if (hdr.m, hdr.h, hdr.digest) != (first.m, first.h, first.digest):
            raise ManifestError(f"{p}: parameters differ from {headers[0][1]}")
    if seeds is not None and seeds.digest() != first.digest:
        raise ManifestError("snapshots were recorded under a different seed table")
    ids = [hdr.period_id for hdr, _ in headers]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate period id")
    headers.sort(key=lambda item: item[0].period_id)
    return Manifest(
        [p for _, p in headers], [h.period_id for h, _ in headers], first.m, first.h, seeds
    )


def write_manifest(man: Manifest, path) -> None:
    path = Path(path)
    path.write_text(man.to_json(path.parent.resolve()) + "\n", encoding="utf-8")


def read_manifest(path) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: unknown manifest format {doc.get('format')!r}")
    seeds = SeedTable(np.array([int(v, 16) for v in doc["seeds"]], dtype=np.uint64))
    if seeds.digest().hex() != doc["seed_digest"]:
        raise ManifestError(f"{path}: seed table does not match its digest")
    paths = [path.parent / entry["path"] for entry in doc["periods"]]
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(str(p))
    man = manifest(paths, seeds)
    if (man.m, man.h) != (doc["m"], doc["h"]):
        raise ManifestError(f"{path}: snapshot parameters disagree with the manifest")
    return man
