"""The GB64 guest binary container.

Layout (all little-endian)::

    header   "GB64" | version:u8 | pad:3 | entry:u64 | nsegs:u32 | pad:4
    segment  preferred_va:u64 | mem_len:u64 | file_len:u64 | perms:u8 | kind:u8 | pad:6
             (repeated nsegs times)
    payload  the file bytes of every segment, concatenated in table order

``perms`` is a PROT_* bitmask; ``kind`` is 0=code, 1=data, 2=bss. A bss
segment has ``file_len == 0``.
"""
import struct
from dataclasses import dataclass

from .abi import PROT_EXEC, PROT_READ, PROT_WRITE, page_up
from .errors import BinaryFormatError

MAGIC = b"GB64"
VERSION = 1
_HDR = struct.Struct("<4sB3xQI4x")
_SEG = struct.Struct("<QQQBB6x")
KINDS = ("code", "data", "bss")
DEFAULT_PERMS = {
    "code": PROT_READ | PROT_EXEC,
    "data": PROT_READ | PROT_WRITE,
    "bss": PROT_READ | PROT_WRITE,
}


@dataclass
class Segment:
    preferred_va: int
    length: int
    perms: int
    kind: str
    data: bytes = b""

    @property
    def end(self):
        return self.preferred_va + self.length

    def image(self):
        """Segment bytes padded with zeros to its memory length."""
        return self.data + bytes(self.length - len(self.data))


@dataclass
class GuestBinary:
    entry: int
    segments: list

    def validate(self):
        segs = sorted(self.segments, key=lambda s: s.preferred_va)
        for a, b in zip(segs, segs[1:]):
            if page_up(a.end) > b.preferred_va:
                raise BinaryFormatError(
                    f"segments at {a.preferred_va:#x} and {b.preferred_va:#x} overlap")
        for s in segs:
            if s.kind not in KINDS:
                raise BinaryFormatError(f"bad segment kind {s.kind!r}")
            if len(s.data) > s.length:
                raise BinaryFormatError("segment data longer than segment")
            if s.preferred_va % 4096:
                raise BinaryFormatError(f"segment {s.preferred_va:#x} not page aligned")
        if not any(s.kind == "code" and s.preferred_va <= self.entry < s.end for s in segs):
            raise BinaryFormatError(f"entry {self.entry:#x} is not inside a code segment")
        return self

    @property
    def image_end(self):
        return max(page_up(s.end) for s in self.segments)

    def to_bytes(self):
        out = [_HDR.pack(MAGIC, VERSION, self.entry, len(self.segments))]
        for s in self.segments:
            out.append(_SEG.pack(s.preferred_va, s.length, len(s.data), s.perms,
                                 KINDS.index(s.kind)))
        out.extend(s.data for s in self.segments)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw):
        if len(raw) < _HDR.size:
            raise BinaryFormatError("truncated header")
        magic, version, entry, nsegs = _HDR.unpack_from(raw, 0)
        if magic != MAGIC:
            raise BinaryFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise BinaryFormatError(f"unsupported version {version}")
        off = _HDR.size
        table = []
        for _ in range(nsegs):
            if off + _SEG.size > len(raw):
                raise BinaryFormatError("truncated segment table")
            table.append(_SEG.unpack_from(raw, off))
            off += _SEG.size
        segs = []
        for va, length, flen, perms, kind in table:
            if kind >= len(KINDS):
                raise BinaryFormatError(f"bad segment kind {kind}")
            data = raw[off:off + flen]
            if len(data) != flen:
                raise BinaryFormatError("truncated segment payload")
            off += flen
            segs.append(Segment(va, length, perms, KINDS[kind], bytes(data)))
        if off != len(raw):
            raise BinaryFormatError("trailing bytes after payload")
        return cls(entry, segs).validate()

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())
