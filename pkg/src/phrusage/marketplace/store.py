"""Three separately rooted stores: application, record and audit data.

Every file starts with the store version header and holds one canonical
JSON entity per line. Medical facts live only in the record store.
"""

from __future__ import annotations

import fcntl
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from ..artifact import Bundle
from ..audit import AuditEntry, AuditLog, read_log_file
from ..bundle_io import bundle_digest, parse_bundle, serialize_bundle
from ..errors import StoreCorrupt, StoreLocked
from ..model import FactCategory, Record, Subject
from ..negotiation import NegotiationSession
from ..storefmt import split_body, write_atomic


@dataclass(frozen=True)
class Listing:
    listing_id: str
    producer: str
    advertised_categories: frozenset[FactCategory]
    blurb: str
    contact: str

    def to_dict(self) -> dict:
        return {
            "listing_id": self.listing_id,
            "producer": self.producer,
            "advertised_categories": sorted(c.value for c in self.advertised_categories),
            "blurb": self.blurb,
            "contact": self.contact,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Listing":
        return cls(
            data["listing_id"],
            data["producer"],
            frozenset(FactCategory(c) for c in data["advertised_categories"]),
            data["blurb"],
            data["contact"],
        )


@dataclass(frozen=True)
class StoredBundle:
    bundle: Bundle
    session_id: Optional[str] = None

    def to_dict(self) -> dict:
        text = serialize_bundle(self.bundle)
        return {"bundle_id": self.bundle.bundle_id, "session_id": self.session_id,
                "digest": bundle_digest(text), "text": text}

    @classmethod
    def from_dict(cls, data: dict) -> "StoredBundle":
        try:
            bundle = parse_bundle(data["text"], data["digest"])
        except ValueError as exc:
            raise StoreCorrupt(f"bundle {data.get('bundle_id')}: {exc}") from exc
        return cls(bundle, data.get("session_id"))


@dataclass
class MarketState:
    subjects: dict[str, Subject] = field(default_factory=dict)
    records: dict[str, Record] = field(default_factory=dict)
    listings: dict[str, Listing] = field(default_factory=dict)
    sessions: dict[str, NegotiationSession] = field(default_factory=dict)
    bundles: dict[str, StoredBundle] = field(default_factory=dict)
    audit: list[AuditEntry] = field(default_factory=list)


@dataclass(frozen=True)
class StorePaths:
    application: Path
    records: Path
    audit: Path

    @classmethod
    def under(cls, root: Path | str) -> "StorePaths":
        root = Path(root)
        return cls(root / "application", root / "records", root / "audit")

    def roots(self) -> tuple[Path, Path, Path]:
        return (self.application, self.records, self.audit)

    # application store
    @property
    def subjects_file(self) -> Path:
        return self.application / "subjects.umgr"

    @property
    def listings_file(self) -> Path:
        return self.application / "listings.umgr"

    @property
    def sessions_file(self) -> Path:
        return self.application / "sessions.umgr"

    @property
    def lock_file(self) -> Path:
        return self.application / "writer.lock"

    # record store
    @property
    def records_file(self) -> Path:
        return self.records / "records.umgr"

    @property
    def bundles_file(self) -> Path:
        return self.records / "bundles.umgr"

    # audit store
    @property
    def audit_file(self) -> Path:
        return self.audit / "audit.log"

    def ensure(self) -> None:
        for root in self.roots():
            root.mkdir(parents=True, exist_ok=True)


def canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _write_entities(path: Path, items) -> None:
    write_atomic(path, [canonical(item.to_dict()) for item in items])


def _read_entities(path: Path, cls) -> list:
    if not path.exists():
        return []
    try:
        return [cls.from_dict(json.loads(line))
                for line in split_body(path.read_text(encoding="utf-8"), str(path))]
    except (KeyError, ValueError) as exc:
        raise StoreCorrupt(f"{path}: {exc}") from exc


def persist(state: MarketState, paths: StorePaths, *, include_audit: bool = True) -> None:
    """Write every entity to its store. Referenced entities are written before referrers."""
    paths.ensure()
    _write_entities(paths.records_file, state.records.values())
    _write_entities(paths.subjects_file, state.subjects.values())
    _write_entities(paths.listings_file, state.listings.values())
    _write_entities(paths.sessions_file, state.sessions.values())
    _write_entities(paths.bundles_file, state.bundles.values())
    if include_audit:
        AuditLog(state.audit).save(paths.audit_file)


def load(paths: StorePaths, *, verify: bool = True) -> MarketState:
    """Read all three stores. With ``verify`` a broken audit chain raises StoreCorrupt."""
    state = MarketState()
    state.records = {r.record_id: r for r in _read_entities(paths.records_file, Record)}
    state.subjects = {s.subject_id: s for s in _read_entities(paths.subjects_file, Subject)}
    state.listings = {x.listing_id: x for x in _read_entities(paths.listings_file, Listing)}
    state.sessions = {s.session_id: s for s in _read_entities(paths.sessions_file, NegotiationSession)}
    state.bundles = {b.bundle.bundle_id: b for b in _read_entities(paths.bundles_file, StoredBundle)}
    if paths.audit_file.exists():
        entries, report = read_log_file(paths.audit_file)
        if verify and not report.ok:
            raise StoreCorrupt(f"audit chain {report}")
        state.audit = entries
    return state


class WriterLock:
    """Exclusive advisory lock: one service per store set."""

    def __init__(self, path: Path):
        self.path = path
        self._fd: Optional[int] = None

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            os.close(fd)
            raise StoreLocked(f"{self.path} is held by another service") from None
        self._fd = fd

    def release(self) -> None:
        if self._fd is not None:
            fcntl.flock(self._fd, fcntl.LOCK_UN)
            os.close(self._fd)
            self._fd = None
