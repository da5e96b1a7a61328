"""Durable event persistence: an append-only session database plus
rotating text logs.

The database (honeypot_sessions.db) is a sequence of length-prefixed,
CRC-checksummed JSON records behind a versioned header; the index is
rebuilt in memory on open and a torn tail left by a crash is trimmed.
One writer thread owns the files; sessions submit records through a
bounded queue and append() returns only after fsync, so an acknowledged
record survives a kill -9. Logging failures are counted and logged but
never propagate into sessions.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

logger = logging.getLogger(__name__)

DB_NAME = "honeypot_sessions.db"
LOG_NAME = "honeypot.log"
DB_HEADER = b"SPOTDB1\n"

EVENT_KINDS = ("auth", "command", "response", "session_open", "session_close")

QUEUE_CAPACITY = 4096


@dataclass
class EventRecord:
    session_uuid: str
    at: datetime
    kind: str
    peer: tuple[str, int]
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.at.tzinfo is None:
            self.at = self.at.replace(tzinfo=timezone.utc)

    @classmethod
    def now(cls, session_uuid: str, kind: str, peer: tuple[str, int],
            payload: dict | None = None) -> "EventRecord":
        return cls(session_uuid, datetime.now(timezone.utc), kind, tuple(peer),
                   payload or {})

    def timestamp_str(self) -> str:
        at = self.at.astimezone(timezone.utc)
        return at.strftime("%Y-%m-%dT%H:%M:%S.") + f"{at.microsecond // 1000:03d}Z"

    def to_json(self) -> bytes:
        doc = {
            "v": 1,
            "uuid": self.session_uuid,
            "at": self.timestamp_str(),
            "kind": self.kind,
            "peer": [self.peer[0], self.peer[1]],
            "payload": self.payload,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_json(cls, data: bytes) -> "EventRecord":
        doc = json.loads(data.decode("utf-8"))
        at = datetime.strptime(doc["at"], "%Y-%m-%dT%H:%M:%S.%fZ").replace(tzinfo=timezone.utc)
        return cls(doc["uuid"], at, doc["kind"], (doc["peer"][0], doc["peer"][1]),
                   doc.get("payload", {}))


def _encode_record(payload: bytes) -> bytes:
    return struct.pack(">II", len(payload), zlib.crc32(payload) & 0xFFFFFFFF) + payload


class LogStore:
    """Single-writer store over a log_dir; safe for concurrent append()."""

    def __init__(self, log_dir, max_bytes: int = 1_000_000, archives: int = 10):
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.db_path = self.log_dir / DB_NAME
        self.log_path = self.log_dir / LOG_NAME
        self.max_bytes = max_bytes
        self.archives = archives
        self.errors = 0

        self._index: dict[str, list[int]] = {}
        self._last_at: dict[str, datetime] = {}
        self._index_lock = threading.Lock()
        self._open_db()
        self._log_lock = threading.Lock()
        self._log_file = open(self.log_path, "ab")
        self._log_size = self.log_path.stat().st_size

        self._queue: queue.Queue = queue.Queue(maxsize=QUEUE_CAPACITY)
        self._closed = threading.Event()
        self._writer = threading.Thread(target=self._writer_loop, name="logstore-writer",
                                        daemon=True)
        self._writer.start()

    # -- database file ------------------------------------------------

    def _open_db(self) -> None:
        exists = self.db_path.exists()
        self._db_file = open(self.db_path, "r+b" if exists else "w+b")
        if not exists or os.fstat(self._db_file.fileno()).st_size == 0:
            self._db_file.write(DB_HEADER)
            self._db_file.flush()
            os.fsync(self._db_file.fileno())
            self._db_size = len(DB_HEADER)
            return
        self._db_size = self._rebuild_index()
        self._db_file.seek(self._db_size)

    def _rebuild_index(self) -> int:
        """Scan the file, index good records, trim a torn tail. Returns size."""
        fh = self._db_file
        fh.seek(0)
        header = fh.read(len(DB_HEADER))
        if header != DB_HEADER:
            raise IOError(f"{self.db_path} is not a session database")
        offset = len(DB_HEADER)
        good_end = offset
        while True:
            frame = fh.read(8)
            if len(frame) < 8:
                break
            length, crc = struct.unpack(">II", frame)
            payload = fh.read(length)
            if len(payload) < length or (zlib.crc32(payload) & 0xFFFFFFFF) != crc:
                logger.warning("%s: trimming torn record at offset %d", self.db_path, offset)
                break
            try:
                record = EventRecord.from_json(payload)
            except (ValueError, KeyError):
                logger.warning("%s: trimming undecodable record at offset %d", self.db_path, offset)
                break
            self._index.setdefault(record.session_uuid, []).append(offset)
            prev = self._last_at.get(record.session_uuid)
            if prev is None or record.at > prev:
                self._last_at[record.session_uuid] = record.at
            offset += 8 + length
            good_end = offset
        fh.truncate(good_end)
        return good_end

    # -- writer thread ------------------------------------------------

    def _writer_loop(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            batch = [item]
            while True:
                try:
                    extra = self._queue.get_nowait()
                except queue.Empty:
                    break
                if extra is None:
                    self._write_batch(batch)
                    return
                batch.append(extra)
            self._write_batch(batch)

    def _write_batch(self, batch: list) -> None:
        staged = []
        for record, done in batch:
            try:
                with self._index_lock:
                    prev = self._last_at.get(record.session_uuid)
                    if prev is not None and record.at < prev:
                        record.at = prev  # wall clock stepped back; keep per-session order
                    self._last_at[record.session_uuid] = record.at
                payload = record.to_json()
                offset = self._db_size
                encoded = _encode_record(payload)
                self._db_file.write(encoded)
                self._db_size += len(encoded)
                staged.append((record, offset, done))
            except Exception:
                self.errors += 1
                logger.exception("failed to stage event record")
                done.set()
        try:
            self._db_file.flush()
            os.fsync(self._db_file.fileno())
        except OSError:
            self.errors += 1
            logger.exception("failed to sync session database")
        with self._index_lock:
            for record, offset, _ in staged:
                self._index.setdefault(record.session_uuid, []).append(offset)
        with self._log_lock:
            for record, _, done in staged:
                try:
                    line = self._format_log_line(record)
                    self._log_file.write(line)
                    self._log_size += len(line)
                except OSError:
                    self.errors += 1
                    logger.exception("failed to mirror record to text log")
                done.set()
            try:
                self._log_file.flush()
                self._rotate_if_needed()
            except OSError:
                self.errors += 1
                logger.exception("failed to flush/rotate text log")

    @staticmethod
    def _format_log_line(record: EventRecord) -> bytes:
        payload = json.dumps(record.payload, sort_keys=True, separators=(",", ":"))
        line = (
            f"{record.timestamp_str()} | {record.session_uuid} | {record.kind} | "
            f"{record.peer[0]}:{record.peer[1]} | {payload}\n"
        )
        return line.encode("utf-8")

    # -- public API ---------------------------------------------------

    def append(self, record: EventRecord) -> None:
        """Durably append; returns after the record is fsync'd to the DB."""
        if self._closed.is_set():
            raise RuntimeError("store is closed")
        done = threading.Event()
        self._queue.put((record, done))
        done.wait()

    def query_session(self, session_uuid: str) -> list[EventRecord]:
        """All records for one session in timestamp order; [] when unknown."""
        with self._index_lock:
            offsets = list(self._index.get(session_uuid, ()))
        records = []
        with open(self.db_path, "rb") as fh:
            for offset in offsets:
                fh.seek(offset)
                length, crc = struct.unpack(">II", fh.read(8))
                payload = fh.read(length)
                records.append(EventRecord.from_json(payload))
        records.sort(key=lambda r: r.at)
        return records

    def session_uuids(self) -> list[str]:
        with self._index_lock:
            return list(self._index)

    def count(self, session_uuid: str | None = None, kind: str | None = None) -> int:
        if session_uuid is not None:
            records = self.query_session(session_uuid)
            return sum(1 for r in records if kind is None or r.kind == kind)
        total = 0
        for uuid_ in self.session_uuids():
            total += self.count(uuid_, kind)
        return total

    def rotate(self, max_bytes: int | None = None) -> None:
        """Rotate the text log now if it exceeds the threshold."""
        if max_bytes is not None:
            self.max_bytes = max_bytes
        with self._log_lock:
            self._rotate_if_needed()

    def _rotate_if_needed(self) -> None:
        # Callers hold _log_lock.
        if self._log_size <= self.max_bytes:
            return
        self._log_file.close()
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S.%f")
        archive = self.log_path.with_name(f"{LOG_NAME}.{stamp}")
        os.replace(self.log_path, archive)
        self._log_file = open(self.log_path, "ab")
        self._log_size = 0
        archives = sorted(self.log_dir.glob(f"{LOG_NAME}.*"))
        while len(archives) > self.archives:
            oldest = archives.pop(0)
            try:
                oldest.unlink()
            except OSError:
                logger.warning("could not delete old archive %s", oldest)

    def close(self) -> None:
        if self._closed.is_set():
            return
        self._closed.set()
        self._queue.put(None)
        self._writer.join(timeout=30)
        self._db_file.close()
        self._log_file.close()

    def __enter__(self) -> "LogStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
