"""On-disk journal format for persisted sessions.

A journal file is a one-line header followed by one record per successful
top-level evaluation::

    REPLISP-JOURNAL 1 {"id": "s1", "policy": {...}, ...}\\n
    J <seq> <turn> <crc32> <n>:<source bytes><m>:<value_repr bytes>\\n

``n`` and ``m`` are UTF-8 byte lengths, so sources may contain newlines.
``crc32`` (8 hex digits) covers ``"<seq> <turn> "`` plus both payloads,
which localizes corruption to one record. Files are replaced atomically
(write to a temp file, fsync, rename).
"""

from __future__ import annotations

import json
import os
import tempfile
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Tuple

MAGIC = b"REPLISP-JOURNAL"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class JournalEntry:
    seq: int
    turn: int
    source: str
    value_repr: str

    def to_dict(self) -> dict:
        return asdict(self)


class JournalFormatError(Exception):
    """Malformed journal file; ``record`` is the 0-based record index (None for the header)."""

    def __init__(self, message: str, record=None, offset: int = 0):
        where = "header" if record is None else f"record {record}"
        super().__init__(f"{where} at byte {offset}: {message}")
        self.record = record
        self.offset = offset


def _crc(seq: int, turn: int, src: bytes, val: bytes) -> int:
    return zlib.crc32(f"{seq} {turn} ".encode() + src + b"\x00" + val) & 0xFFFFFFFF


def encode_entry(entry: JournalEntry) -> bytes:
    src = entry.source.encode("utf-8")
    val = entry.value_repr.encode("utf-8")
    crc = _crc(entry.seq, entry.turn, src, val)
    return b"J %d %d %08x %d:%s%d:%s\n" % (entry.seq, entry.turn, crc, len(src), src, len(val), val)


def encode(meta: dict, entries: List[JournalEntry]) -> bytes:
    header = MAGIC + b" %d " % FORMAT_VERSION + json.dumps(meta, sort_keys=True).encode("utf-8") + b"\n"
    return header + b"".join(encode_entry(e) for e in entries)


def _read_int(data: bytes, pos: int, stop: bytes, record, name: str) -> Tuple[int, int]:
    end = data.find(stop, pos)
    if end < 0:
        raise JournalFormatError(f"missing {name}", record, pos)
    raw = data[pos:end]
    if not raw or not raw.lstrip(b"-").isdigit():
        raise JournalFormatError(f"bad {name} {raw[:20]!r}", record, pos)
    return int(raw), end + 1


def decode(data: bytes) -> Tuple[dict, List[JournalEntry]]:
    nl = data.find(b"\n")
    if nl < 0:
        raise JournalFormatError("missing header line")
    parts = data[:nl].split(b" ", 2)
    if len(parts) != 3 or parts[0] != MAGIC:
        raise JournalFormatError("not a replisp journal")
    if parts[1] != str(FORMAT_VERSION).encode():
        raise JournalFormatError(f"unsupported format version {parts[1].decode('ascii', 'replace')}")
    try:
        meta = json.loads(parts[2])
    except ValueError as exc:
        raise JournalFormatError(f"bad header metadata: {exc}") from None
    entries: List[JournalEntry] = []
    pos = nl + 1
    while pos < len(data):
        index = len(entries)
        start = pos
        if data[pos:pos + 2] != b"J ":
            raise JournalFormatError("expected record marker", index, pos)
        pos += 2
        seq, pos = _read_int(data, pos, b" ", index, "seq")
        turn, pos = _read_int(data, pos, b" ", index, "turn")
        crc_raw = data[pos:pos + 8]
        if len(crc_raw) != 8 or data[pos + 8:pos + 9] != b" ":
            raise JournalFormatError("bad checksum field", index, pos)
        try:
            crc = int(crc_raw, 16)
        except ValueError:
            raise JournalFormatError("bad checksum field", index, pos) from None
        pos += 9
        n, pos = _read_int(data, pos, b":", index, "source length")
        src = data[pos:pos + n]
        if len(src) != n:
            raise JournalFormatError("truncated source", index, pos)
        pos += n
        m, pos = _read_int(data, pos, b":", index, "value length")
        val = data[pos:pos + m]
        if len(val) != m or data[pos + m:pos + m + 1] != b"\n":
            raise JournalFormatError("truncated record", index, pos)
        pos += m + 1
        if _crc(seq, turn, src, val) != crc:
            raise JournalFormatError("checksum mismatch", index, start)
        if seq != index:
            raise JournalFormatError(f"seq {seq} out of order (expected {index})", index, start)
        try:
            entry = JournalEntry(seq, turn, src.decode("utf-8"), val.decode("utf-8"))
        except UnicodeDecodeError:
            raise JournalFormatError("invalid UTF-8", index, start) from None
        entries.append(entry)
    return meta, entries


def write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def load(path: Path) -> Tuple[dict, List[JournalEntry]]:
    return decode(Path(path).read_bytes())


def validate_sources(entries: List[JournalEntry]) -> None:
    """Every journaled source must re-read without a ReaderError."""
    from .lisp import ReaderError, read

    for entry in entries:
        try:
            read(entry.source)
        except ReaderError as exc:
            raise JournalFormatError(f"source does not read: {exc.message}", entry.seq) from None
