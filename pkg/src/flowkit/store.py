"""
Time-rotated binary flow files.

Each file holds a 16-byte header followed by fixed 72-byte little-endian
records::

    header: magic "FSTR", u16 format version (1), u16 record size (72),
            u64 record count (all ones while the file is being written)
    record: u64 first_seen ms, u64 last_seen ms, 16s src, 16s dst,
            u16 src port, u16 dst port, u8 protocol, u8 tcp flags,
            u8 ip version, u8 reserved (0), u64 packets, u64 bytes

IPv4 addresses are stored as v4-mapped IPv6. Files are named
``flows.YYYYMMDDhhmm`` after the UTC start of their rotation window.
"""
from __future__ import annotations

import datetime as dt
import fcntl
import ipaddress
import logging
import os
import re
import struct
from pathlib import Path
from typing import Iterator, Optional, Union

from flowkit.flow import FlowKey, FlowRecord

log = logging.getLogger(__name__)

MAGIC = b"FSTR"
FORMAT_VERSION = 1
RECORD_SIZE = 72
OPEN_SENTINEL = 0xFFFFFFFFFFFFFFFF
DEFAULT_ROTATE = 300

HEADER = struct.Struct("<4sHHQ")
RECORD = struct.Struct("<QQ16s16sHHBBBBQQ")
assert HEADER.size == 16 and RECORD.size == RECORD_SIZE

_NAME_RE = re.compile(r"^flows\.(\d{12})$")
_V4_MAPPED_PREFIX = b"\x00" * 10 + b"\xff\xff"


class StoreError(Exception):
    pass


class StoreLocked(StoreError):
    pass


def pack_record(rec: FlowRecord) -> bytes:
    k = rec.key
    if k.ip_version == 4:
        src = _V4_MAPPED_PREFIX + k.src_ip.packed
        dst = _V4_MAPPED_PREFIX + k.dst_ip.packed
    else:
        src, dst = k.src_ip.packed, k.dst_ip.packed
    try:
        return RECORD.pack(rec.first_seen, rec.last_seen, src, dst, k.src_port, k.dst_port,
                           k.protocol, rec.tcp_flags, k.ip_version, 0, rec.packets, rec.bytes)
    except struct.error as exc:
        raise ValueError(f"record not storable: {exc}") from None


def unpack_record(buf, offset: int = 0) -> FlowRecord:
    (first, last, src, dst, sport, dport, proto, flags, version, _reserved,
     packets, octets) = RECORD.unpack_from(buf, offset)
    if version == 4:
        s, d = ipaddress.IPv4Address(src[12:]), ipaddress.IPv4Address(dst[12:])
    else:
        s, d = ipaddress.IPv6Address(src), ipaddress.IPv6Address(dst)
    return FlowRecord(FlowKey(version, s, d, proto, sport, dport), first, last,
                      packets, octets, flags)


def window_start(now: float, rotate: int = DEFAULT_ROTATE) -> int:
    """Start (epoch seconds) of the rotation window containing ``now``."""
    return int(now // rotate) * rotate


def file_name(start: int) -> str:
    return "flows." + dt.datetime.fromtimestamp(start, dt.timezone.utc).strftime("%Y%m%d%H%M")


def parse_file_name(name: str) -> Optional[int]:
    m = _NAME_RE.match(name)
    if not m:
        return None
    try:
        t = dt.datetime.strptime(m.group(1), "%Y%m%d%H%M").replace(tzinfo=dt.timezone.utc)
    except ValueError:
        return None
    return int(t.timestamp())


class FlowStore:
    """Single writer for a store directory, guarded by ``.lock``."""

    def __init__(self, directory: Union[str, os.PathLike], rotate: int = DEFAULT_ROTATE,
                 flush_every: int = 64):
        if rotate <= 0:
            raise ValueError("rotate must be positive")
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.rotate = rotate
        self.flush_every = flush_every
        self._lock_fh = open(self.directory / ".lock", "a+")
        try:
            fcntl.flock(self._lock_fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            self._lock_fh.close()
            raise StoreLocked(f"{self.directory} is locked by another writer") from None
        self._fd: Optional[int] = None
        self._window: Optional[int] = None
        self._count = 0
        self._pending = bytearray()
        self.records_written = 0
        self.files_finalized = 0

    @property
    def current_path(self) -> Optional[Path]:
        return None if self._window is None else self.directory / file_name(self._window)

    def append(self, record: FlowRecord, now: float) -> None:
        start = window_start(now, self.rotate)
        if start != self._window:
            self._rotate(start)
        self._pending += pack_record(record)
        self._count += 1
        self.records_written += 1
        if len(self._pending) >= self.flush_every * RECORD_SIZE:
            self.flush()

    def flush(self) -> None:
        """Write buffered records. Only whole records are ever written."""
        if self._fd is not None and self._pending:
            os.write(self._fd, bytes(self._pending))
            self._pending.clear()

    def _rotate(self, start: int) -> None:
        self._finalize()
        path = self.directory / file_name(start)
        fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
        size = os.fstat(fd).st_size
        count = 0
        if size >= HEADER.size:
            magic, _ver, rsize, _ = HEADER.unpack(os.pread(fd, HEADER.size, 0))
            if magic != MAGIC or rsize != RECORD_SIZE:
                os.close(fd)
                raise StoreError(f"{path} exists and is not a flow file")
            count = (size - HEADER.size) // RECORD_SIZE
            # Resume after a restart: drop any torn tail, append after it.
            os.ftruncate(fd, HEADER.size + count * RECORD_SIZE)
        os.pwrite(fd, HEADER.pack(MAGIC, FORMAT_VERSION, RECORD_SIZE, OPEN_SENTINEL), 0)
        os.lseek(fd, 0, os.SEEK_END)
        self._fd, self._window, self._count = fd, start, count

    def _finalize(self) -> None:
        if self._fd is None:
            return
        self.flush()
        os.pwrite(self._fd, HEADER.pack(MAGIC, FORMAT_VERSION, RECORD_SIZE, self._count), 0)
        os.fsync(self._fd)
        os.close(self._fd)
        self._fd = None
        self.files_finalized += 1

    def close(self) -> None:
        self._finalize()
        self._window = None
        if not self._lock_fh.closed:
            fcntl.flock(self._lock_fh, fcntl.LOCK_UN)
            self._lock_fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_file(path: Union[str, os.PathLike]) -> Iterator[FlowRecord]:
    """Yield the records of one store file.

    Bad headers and torn trailing records are logged and tolerated.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < HEADER.size:
        log.warning("event=store_skip file=%s reason=short_header", path.name)
        return
    magic, version, rsize, count = HEADER.unpack_from(data)
    if magic != MAGIC or rsize != RECORD_SIZE:
        log.warning("event=store_skip file=%s reason=bad_magic", path.name)
        return
    if version != FORMAT_VERSION:
        log.warning("event=store_skip file=%s reason=version_%d", path.name, version)
        return
    body = len(data) - HEADER.size
    available, tail = divmod(body, RECORD_SIZE)
    if tail:
        log.warning("event=store_truncated file=%s partial_bytes=%d", path.name, tail)
    if count != OPEN_SENTINEL and count != available:
        log.warning("event=store_count_mismatch file=%s header=%d body=%d",
                    path.name, count, available)
        available = min(count, available)
    mv = memoryview(data)
    for i in range(available):
        yield unpack_record(mv, HEADER.size + i * RECORD_SIZE)


def list_files(directory: Union[str, os.PathLike]) -> list[tuple[int, Path]]:
    """(window start seconds, path) for each store file, oldest first."""
    directory = Path(directory)
    if not directory.is_dir():
        return []
    out = []
    for p in directory.iterdir():
        start = parse_file_name(p.name)
        if start is not None and p.is_file():
            out.append((start, p))
    out.sort()
    return out


def scan(directory: Union[str, os.PathLike],
         time_range: Optional[tuple[Optional[int], Optional[int]]] = None,
         rotate: int = DEFAULT_ROTATE) -> Iterator[FlowRecord]:
    """Yield records from every file whose window meets ``time_range``.

    ``time_range`` is an inclusive (from_ms, to_ms) pair; either side may be
    None. Selection is by file window only, records are not filtered.
    """
    lo, hi = time_range if time_range is not None else (None, None)
    for start, path in list_files(directory):
        start_ms = start * 1000
        end_ms = start_ms + rotate * 1000
        if hi is not None and start_ms > hi:
            continue
        if lo is not None and end_ms <= lo:
            continue
        yield from read_file(path)
