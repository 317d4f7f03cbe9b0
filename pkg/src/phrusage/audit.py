"""Append-only, SHA-256 hash-chained audit log.

Each entry commits to its predecessor, so altering, dropping or reordering
any entry breaks the chain at (or before) the altered position. Truncation
of the tail is only visible against a recorded head (length, last hash),
which the file form keeps in a sibling ``.head`` file.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

from .errors import StoreCorrupt
from .storefmt import STORE_HEADER, check_header, write_atomic

GENESIS_HASH = "0" * 64

EVENT_KINDS = (
    "fact_appended",
    "fact_superseded",
    "decision_rendered",
    "session_event",
    "bundle_issued",
    "compensation_attributed",
)
MUTATION_KINDS = ("fact_appended", "fact_superseded")

_HEX64 = re.compile(r"^[0-9a-f]{64}$")
_UINT = re.compile(r"^(0|[1-9][0-9]*)$")
_INT = re.compile(r"^-?(0|[1-9][0-9]*)$")


def canonical_detail(detail: Any) -> str:
    """Sorted-key, whitespace-free JSON. Never contains a tab or newline."""
    return json.dumps(detail, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def entry_digest(sequence: int, timestamp: int, actor: str, event_kind: str,
                 detail: str, prev_hash: str) -> str:
    payload = "\t".join([str(sequence), str(timestamp), actor, event_kind, detail, prev_hash])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class AuditEntry:
    sequence: int
    timestamp: int
    actor: str
    event_kind: str
    detail: str
    prev_hash: str
    entry_hash: str

    def payload(self) -> dict:
        return json.loads(self.detail)

    def recompute(self) -> str:
        return entry_digest(self.sequence, self.timestamp, self.actor,
                            self.event_kind, self.detail, self.prev_hash)

    def to_line(self) -> str:
        return "\t".join([
            str(self.sequence), str(self.timestamp), self.actor, self.event_kind,
            self.detail, self.prev_hash, self.entry_hash,
        ])

    @classmethod
    def from_line(cls, line: str) -> "AuditEntry":
        """Strict parse; any non-canonical field raises ValueError."""
        parts = line.split("\t")
        if len(parts) != 7:
            raise ValueError(f"expected 7 fields, found {len(parts)}")
        seq, ts, actor, kind, detail, prev, digest = parts
        if not _UINT.match(seq) or not _INT.match(ts):
            raise ValueError("non-canonical integer field")
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        if not (_HEX64.match(prev) and _HEX64.match(digest)):
            raise ValueError("malformed digest")
        if canonical_detail(json.loads(detail)) != detail:
            raise ValueError("detail is not canonical")
        return cls(int(seq), int(ts), actor, kind, detail, prev, digest)


@dataclass(frozen=True)
class ChainReport:
    """``first_bad`` is None for an intact chain, else the earliest bad position."""

    first_bad: Optional[int] = None

    @property
    def ok(self) -> bool:
        return self.first_bad is None

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        return "ok" if self.ok else f"Tampered({self.first_bad})"


@dataclass(frozen=True)
class ChainHead:
    length: int
    last_hash: str

    def to_line(self) -> str:
        return f"{self.length}\t{self.last_hash}"

    @classmethod
    def from_line(cls, line: str) -> "ChainHead":
        length, last = line.split("\t")
        if not _UINT.match(length) or not (last == GENESIS_HASH or _HEX64.match(last)):
            raise ValueError("malformed head")
        return cls(int(length), last)


def head_of(entries: Sequence[AuditEntry]) -> ChainHead:
    return ChainHead(len(entries), entries[-1].entry_hash if entries else GENESIS_HASH)


def verify_chain(entries: Sequence[Optional[AuditEntry]], head: ChainHead | None = None) -> ChainReport:
    """Check sequence numbers, links and digests; report the earliest violation.

    ``None`` items stand for lines that failed to parse. With ``head`` the
    tail is also checked, catching truncation.
    """
    prev = GENESIS_HASH
    for pos, entry in enumerate(entries):
        if (
            entry is None
            or entry.sequence != pos
            or entry.prev_hash != prev
            or entry.recompute() != entry.entry_hash
        ):
            return ChainReport(pos)
        prev = entry.entry_hash
    if head is not None:
        n = len(entries)
        if head.length > n:
            return ChainReport(n)
        if head.length < n:
            return ChainReport(head.length)
        if head.last_hash != prev:
            return ChainReport(max(n - 1, 0))
    return ChainReport()


def edit_history(entries: Iterable[AuditEntry], record_id: str) -> list[AuditEntry]:
    """Record mutations for one record, in sequence order."""
    out = [
        e for e in entries
        if e.event_kind in MUTATION_KINDS and e.payload().get("record_id") == record_id
    ]
    return sorted(out, key=lambda e: e.sequence)


def render_log(entries: Iterable[AuditEntry]) -> str:
    return "".join(e.to_line() + "\n" for e in entries)


def parse_log(data: bytes) -> list[Optional[AuditEntry]]:
    """Parse entry lines, mapping each undecodable or malformed line to None."""
    chunks = data.split(b"\n")
    if chunks and chunks[-1] == b"":
        chunks.pop()
    out: list[Optional[AuditEntry]] = []
    for chunk in chunks:
        try:
            out.append(AuditEntry.from_line(chunk.decode("utf-8")))
        except (UnicodeDecodeError, ValueError):
            out.append(None)
    return out


class AuditLog:
    """Single-writer audit log. Readers get consistent snapshots.

    When ``path`` is given every append is also written through to disk,
    together with the chain head.
    """

    def __init__(self, entries: Iterable[AuditEntry] = (), path: Path | None = None):
        self._entries: list[AuditEntry] = list(entries)
        self._lock = threading.Lock()
        self._path = Path(path) if path is not None else None

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self.entries())

    def entries(self) -> tuple[AuditEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    @property
    def head(self) -> ChainHead:
        with self._lock:
            return head_of(self._entries)

    def append(self, *, timestamp: int, actor: str, event_kind: str, detail: Any) -> AuditEntry:
        if event_kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {event_kind!r}")
        if any(c in actor for c in "\t\n\r"):
            raise ValueError("actor must not contain tabs or line breaks")
        text = detail if isinstance(detail, str) else canonical_detail(detail)
        with self._lock:
            seq = len(self._entries)
            prev = self._entries[-1].entry_hash if self._entries else GENESIS_HASH
            entry = AuditEntry(seq, int(timestamp), actor, event_kind, text, prev,
                               entry_digest(seq, int(timestamp), actor, event_kind, text, prev))
            self._entries.append(entry)
            if self._path is not None:
                self._write_through(entry)
        return entry

    def verify(self) -> ChainReport:
        return verify_chain(self.entries())

    def history(self, record_id: str) -> list[AuditEntry]:
        return edit_history(self.entries(), record_id)

    # file backing

    def _write_through(self, entry: AuditEntry) -> None:
        assert self._path is not None
        if not self._path.exists():
            self._path.write_text(STORE_HEADER + "\n", encoding="utf-8")
        with open(self._path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(entry.to_line() + "\n")
        write_atomic(head_path(self._path), [head_of(self._entries).to_line()])

    def save(self, path: Path) -> None:
        entries = self.entries()
        write_atomic(path, [e.to_line() for e in entries])
        write_atomic(head_path(path), [head_of(entries).to_line()])

    @classmethod
    def open(cls, path: Path) -> "AuditLog":
        """Load and verify a log file; a broken chain raises StoreCorrupt."""
        path = Path(path)
        if not path.exists():
            log = cls(path=path)
            log.save(path)
            return log
        entries, report = read_log_file(path)
        if not report.ok:
            raise StoreCorrupt(f"audit chain {report} in {path}")
        return cls(entries, path=path)


def head_path(path: Path) -> Path:
    return Path(path).with_name(Path(path).name + ".head")


def read_log_file(path: Path) -> tuple[list[AuditEntry], ChainReport]:
    """Parse and verify a log file (header line, entries, optional head file)."""
    path = Path(path)
    raw = path.read_bytes()
    first, _, body = raw.partition(b"\n")
    check_header(first.decode("utf-8", "replace"), str(path))
    parsed = parse_log(body)
    head = None
    hp = head_path(path)
    if hp.exists():
        lines = hp.read_text(encoding="utf-8").split("\n")
        check_header(lines[0], str(hp))
        try:
            head = ChainHead.from_line(lines[1])
        except (IndexError, ValueError):
            return [e for e in parsed if e is not None], ChainReport(0)
    report = verify_chain(parsed, head)
    return [e for e in parsed if e is not None], report
