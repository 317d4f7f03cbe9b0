"""Marketplace service: registry, listings, negotiation transport and bundle delivery.

``MarketplaceService.handle`` takes one decoded request ``{kind, request_id,
payload}`` and returns ``{request_id, ok, payload | error}``. The socket
server in this module and the in-process ``LocalClient`` both go through it.
All writes are serialized by one lock; every audit append is written through
to the audit store before the entity stores are rewritten.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from copy import copy
from decimal import Decimal
from pathlib import Path
from typing import Any, Callable, Optional

from ..artifact import (
    aggregate,
    attribute_compensation,
    redistribute_bundle,
    request_use,
)
from ..audit import AuditLog, edit_history
from ..bundle_io import bundle_digest, serialize_bundle
from ..errors import (
    BindFailure,
    ConflictError,
    EmptyQuery,
    RoleNotAuthorized,
    StoreCorrupt,
    UsageError,
)
from ..model import (
    Context,
    Environment,
    Fact,
    FactCategory,
    Record,
    RoleKind,
    Subject,
    append_fact,
    supersede_fact,
)
from ..negotiation import (
    Accept,
    Counter,
    Party,
    Proposal,
    Reject,
    conclude_to_bundle,
    open_session,
    respond,
)
from ..policy import Action
from . import wire
from .store import Listing, MarketState, StoredBundle, StorePaths, WriterLock, load, persist

log = logging.getLogger(__name__)

ENDPOINTS = (
    "register_subject",
    "create_record",
    "append_fact",
    "supersede_fact",
    "create_listing",
    "search",
    "open_session",
    "respond",
    "fetch_bundle",
    "request_use",
    "aggregate",
    "redistribute",
    "attribute",
    "audit_history",
    "verify_audit",
)


class RequestError(UsageError):
    """Malformed or unresolvable request (unknown ids, wrong party, ...)."""


def search_listings(listings, query) -> list[Listing]:
    query = frozenset(FactCategory(c) for c in query)
    if not query:
        raise EmptyQuery("search needs at least one category")
    return sorted((x for x in listings if x.advertised_categories & query),
                  key=lambda x: x.listing_id)


class MarketplaceService:
    def __init__(self, store: StorePaths | Path | str | None = None,
                 clock: Callable[[], int] | None = None):
        self._lock = threading.RLock()
        self._clock = clock or (lambda: int(time.time()))
        self._writer_lock: Optional[WriterLock] = None
        if store is None:
            self.paths = None
            self.state = MarketState()
            self.audit = AuditLog()
            return
        self.paths = store if isinstance(store, StorePaths) else StorePaths.under(store)
        self.paths.ensure()
        self._writer_lock = WriterLock(self.paths.lock_file)
        self._writer_lock.acquire()
        try:
            self.state = load(self.paths)
            self.audit = AuditLog.open(self.paths.audit_file)
        except Exception:
            self._writer_lock.release()
            raise
        if len(self.audit) != len(self.state.audit):  # pragma: no cover - same file
            raise StoreCorrupt("audit store changed during startup")

    def close(self) -> None:
        if self._writer_lock is not None:
            self._writer_lock.release()
            self._writer_lock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # dispatch

    def handle(self, message: dict) -> dict:
        request_id = message.get("request_id") if isinstance(message, dict) else None
        try:
            if not isinstance(message, dict):
                raise RequestError("request must be an object")
            kind = message.get("kind")
            if kind not in ENDPOINTS:
                raise RequestError(f"unknown kind {kind!r}")
            payload = message.get("payload") or {}
            result = getattr(self, f"_do_{kind}")(payload)
            return {"request_id": request_id, "ok": True, "payload": result}
        except (UsageError, KeyError, ValueError, TypeError) as exc:
            error = {"type": type(exc).__name__, "message": str(exc)}
            if isinstance(exc, ConflictError):
                error["conflicts"] = [[pid, d.to_dict()] for pid, d in exc.conflicts]
            return {"request_id": request_id, "ok": False, "error": error}

    def snapshot(self) -> MarketState:
        with self._lock:
            s = copy(self.state)
            s.subjects, s.records = dict(s.subjects), dict(s.records)
            s.listings, s.sessions = dict(s.listings), dict(s.sessions)
            s.bundles = dict(s.bundles)
            s.audit = list(self.audit.entries())
            return s

    def _commit(self) -> None:
        self.state.audit = list(self.audit.entries())
        if self.paths is not None:
            persist(self.state, self.paths, include_audit=False)

    def _now(self, payload: dict) -> int:
        return int(payload["now"]) if payload.get("now") is not None else self._clock()

    def _subject(self, subject_id: str) -> Subject:
        try:
            return self.state.subjects[subject_id]
        except KeyError:
            raise RequestError(f"unknown subject {subject_id!r}") from None

    def _context(self, data: dict) -> Context:
        return Context(self._subject(data["subject_id"]), RoleKind(data["role"]),
                       Environment.from_dict(data["environment"]))

    def _record(self, record_id: str) -> Record:
        try:
            return self.state.records[record_id]
        except KeyError:
            raise RequestError(f"unknown record {record_id!r}") from None

    def _bundle(self, bundle_id: str):
        try:
            return self.state.bundles[bundle_id].bundle
        except KeyError:
            raise RequestError(f"unknown bundle {bundle_id!r}") from None

    # registry and records

    def _do_register_subject(self, p: dict) -> dict:
        roles = frozenset(RoleKind(r) for r in p.get("verified_roles", ()))
        if any(r.is_provider for r in roles) and not p.get("credentials_verified", False):
            raise RoleNotAuthorized("provider roles need verified credentials")
        subject = Subject(p["subject_id"], p.get("display_name", ""),
                          dict(p.get("parameters", {})), roles)
        with self._lock:
            if subject.subject_id in self.state.subjects:
                raise RequestError(f"subject {subject.subject_id!r} already registered")
            self.state.subjects[subject.subject_id] = subject
            self._commit()
        return subject.to_dict()

    def _do_create_record(self, p: dict) -> dict:
        with self._lock:
            owner = self._subject(p["owner"]).subject_id
            if p["record_id"] in self.state.records:
                raise RequestError(f"record {p['record_id']!r} exists")
            record = Record(p["record_id"], owner)
            self.state.records[record.record_id] = record
            self._commit()
        return {"record_id": record.record_id, "version": record.version}

    def _do_append_fact(self, p: dict) -> dict:
        with self._lock:
            ctx = self._context(p["context"])
            record = append_fact(self._record(p["record_id"]), Fact.from_dict(p["fact"]), ctx,
                                 log=self.audit)
            self.state.records[record.record_id] = record
            self._commit()
        return {"record_id": record.record_id, "version": record.version}

    def _do_supersede_fact(self, p: dict) -> dict:
        with self._lock:
            ctx = self._context(p["context"])
            record = supersede_fact(self._record(p["record_id"]), p["old_id"],
                                    Fact.from_dict(p["fact"]), ctx, log=self.audit)
            self.state.records[record.record_id] = record
            self._commit()
        return {"record_id": record.record_id, "version": record.version}

    # listings

    def _do_create_listing(self, p: dict) -> dict:
        with self._lock:
            record = self._record(p["record_id"])
            producer = p["producer"]
            if record.owner != producer:
                raise RequestError("listings advertise the producer's own record")
            advertised = frozenset(FactCategory(c) for c in p["advertised_categories"])
            missing = advertised - record.categories
            if missing:
                raise RequestError("advertised categories not present in the record: "
                                   + ", ".join(sorted(c.value for c in missing)))
            listing = Listing(p["listing_id"], producer, advertised, p.get("blurb", ""),
                              p.get("contact", producer))
            self.state.listings[listing.listing_id] = listing
            self._commit()
        return listing.to_dict()

    def _do_search(self, p: dict) -> dict:
        with self._lock:
            listings = list(self.state.listings.values())
        return {"listings": [x.to_dict() for x in search_listings(listings, p.get("categories", ()))]}

    # negotiation

    def _do_open_session(self, p: dict) -> dict:
        with self._lock:
            now = self._now(p)
            producer = self._subject(p["producer"]).subject_id
            consumer = self._subject(p["consumer"]).subject_id
            record = self._record(p["record_id"])
            if record.owner != producer:
                raise RequestError("sessions are opened with the record owner")
            proposal = Proposal.from_dict(p["proposal"])
            session = open_session(producer, consumer, record.record_id, proposal,
                                   max_rounds=int(p.get("max_rounds", 16)),
                                   session_id=p.get("session_id"), log=None, now=now)
            if session.session_id in self.state.sessions:
                raise RequestError(f"session {session.session_id!r} exists")
            session = open_session(producer, consumer, record.record_id, proposal,
                                   max_rounds=session.max_rounds, session_id=session.session_id,
                                   log=self.audit, now=now)
            self.state.sessions[session.session_id] = session
            self._commit()
        return session.to_dict()

    def _do_respond(self, p: dict) -> dict:
        with self._lock:
            now = self._now(p)
            try:
                session = self.state.sessions[p["session_id"]]
            except KeyError:
                raise RequestError(f"unknown session {p['session_id']!r}") from None
            party = Party(p["party"])
            if p.get("subject_id") is not None and p["subject_id"] != session.party_id(party):
                raise RequestError(f"{p['subject_id']} is not the {party.value}")
            move = p["response"]
            if move == "accept":
                response = Accept()
            elif move == "reject":
                response = Reject(p.get("reason", ""))
            elif move == "counter":
                response = Counter(Proposal.from_dict(p["proposal"]))
            else:
                raise RequestError(f"unknown response {move!r}")
            session = respond(session, party, response, log=self.audit, now=now)
            self.state.sessions[session.session_id] = session
            self._commit()
        return session.to_dict()

    def _do_fetch_bundle(self, p: dict) -> dict:
        with self._lock:
            now = self._now(p)
            try:
                session = self.state.sessions[p["session_id"]]
            except KeyError:
                raise RequestError(f"unknown session {p['session_id']!r}") from None
            if p.get("subject_id") not in (session.consumer, None):
                raise RequestError("only the negotiating consumer may fetch the bundle")
            existing = [b for b in self.state.bundles.values() if b.session_id == session.session_id]
            if existing:
                bundle = existing[0].bundle
            else:
                bundle = conclude_to_bundle(session, self._record(session.record_id), now,
                                            consumer=self._subject(session.consumer), log=self.audit)
                self.state.bundles[bundle.bundle_id] = StoredBundle(bundle, session.session_id)
                self._commit()
        text = serialize_bundle(bundle)
        return {"bundle_id": bundle.bundle_id, "text": text, "digest": bundle_digest(text)}

    # use, aggregation, attribution

    def _do_request_use(self, p: dict) -> dict:
        with self._lock:
            now = self._now(p)
            ctx = self._context(p["context"])
            decision = request_use(self._bundle(p["bundle_id"]), Action(p["action"]),
                                   [FactCategory(c) for c in p["categories"]], ctx, now,
                                   log=self.audit)
            self._commit()
        return decision.to_dict()

    def _aggregate(self, p: dict, ctx: Context, now: int):
        bundles = [self._bundle(b) for b in p["bundle_ids"]]
        return aggregate(bundles, Action(p.get("action", "aggregate")), ctx, now, log=self.audit)

    def _do_aggregate(self, p: dict) -> dict:
        with self._lock:
            now = self._now(p)
            ctx = self._context(p["context"])
            try:
                agg = self._aggregate(p, ctx, now)
            finally:
                self._commit()
        return _aggregate_summary(agg)

    def _do_redistribute(self, p: dict) -> dict:
        with self._lock:
            now = self._now(p)
            ctx = self._context(p["context"])
            self._subject(p["new_consumer"])
            try:
                agg = self._aggregate(p, ctx, now)
                bundle = redistribute_bundle(agg, p["new_consumer"], ctx, now, log=self.audit)
                self.state.bundles[bundle.bundle_id] = StoredBundle(bundle)
            finally:
                self._commit()
        text = serialize_bundle(bundle)
        return {"bundle_id": bundle.bundle_id, "text": text, "digest": bundle_digest(text)}

    def _do_attribute(self, p: dict) -> dict:
        with self._lock:
            now = self._now(p)
            ctx = self._context(p["context"])
            try:
                agg = self._aggregate(p, ctx, now)
                split = attribute_compensation(agg, Decimal(p["payment"]), log=self.audit,
                                               now=now, actor=ctx.subject.subject_id)
            finally:
                self._commit()
        return {"split": [[owner, str(amount)] for owner, amount in split]}

    # audit

    def _do_audit_history(self, p: dict) -> dict:
        with self._lock:
            record = self._record(p["record_id"])
            if p.get("requester") != record.owner:
                raise RequestError("edit history is readable by the record owner only")
            entries = edit_history(self.audit.entries(), record.record_id)
        return {"entries": [_entry_dict(e) for e in entries]}

    def _do_verify_audit(self, p: dict) -> dict:
        report = self.audit.verify()
        return {"ok": report.ok, "report": str(report), "length": len(self.audit)}


def _entry_dict(e) -> dict:
    return {"sequence": e.sequence, "timestamp": e.timestamp, "actor": e.actor,
            "event_kind": e.event_kind, "detail": e.payload(), "entry_hash": e.entry_hash}


def _aggregate_summary(agg) -> dict:
    return {
        "elements": [[rid, sorted(f.fact_id for f in facts)] for rid, facts in agg.elements],
        "licenses": [lic.license_id for lic in agg.constituent_licenses],
        "categories": sorted(c.value for c in agg.categories),
    }


# transport

class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        service: MarketplaceService = self.server.service  # type: ignore[attr-defined]
        while True:
            try:
                message = wire.read_frame(self.request)
            except wire.FrameError as exc:
                wire.write_frame(self.request, {"request_id": None, "ok": False,
                                                "error": {"type": "FrameError", "message": str(exc)}})
                return
            except OSError:
                return
            if message is None:
                return
            wire.write_frame(self.request, service.handle(message))


class _TCPServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True


class _UnixServer(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
    daemon_threads = True


class ServiceHandle:
    """A running socket service; ``stop`` shuts it down and releases the store."""

    def __init__(self, server, service: MarketplaceService):
        self._server = server
        self.service = service
        self._thread = threading.Thread(target=server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def address(self):
        return self._server.server_address

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()
        self.service.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(bind_address, store: StorePaths | Path | str | None,
          clock: Callable[[], int] | None = None) -> ServiceHandle:
    """Start a service on ``bind_address``: a (host, port) pair or a Unix socket path."""
    service = MarketplaceService(store, clock=clock)
    try:
        if isinstance(bind_address, (str, Path)):
            server = _UnixServer(str(bind_address), _Handler)
        else:
            server = _TCPServer(tuple(bind_address), _Handler)
    except OSError as exc:
        service.close()
        raise BindFailure(f"cannot bind {bind_address}: {exc}") from exc
    server.service = service  # type: ignore[attr-defined]
    log.info("marketplace listening on %s", server.server_address)
    return ServiceHandle(server, service)


class Client:
    """Blocking socket client speaking the length-prefixed protocol."""

    def __init__(self, address):
        family = socket.AF_UNIX if isinstance(address, (str, Path)) else socket.AF_INET
        self._sock = socket.socket(family, socket.SOCK_STREAM)
        self._sock.connect(str(address) if family == socket.AF_UNIX else tuple(address))
        self._next_id = 0

    def call(self, kind: str, **payload: Any) -> dict:
        self._next_id += 1
        wire.write_frame(self._sock, {"kind": kind, "request_id": self._next_id, "payload": payload})
        response = wire.read_frame(self._sock)
        if response is None:
            raise ConnectionError("service closed the connection")
        return response

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LocalClient:
    """In-process client; messages still pass through the JSON wire encoding."""

    def __init__(self, service: MarketplaceService):
        self.service = service
        self._next_id = 0

    def call(self, kind: str, **payload: Any) -> dict:
        self._next_id += 1
        frame = wire.encode({"kind": kind, "request_id": self._next_id, "payload": payload})
        request = wire.decode_body(frame[wire.HEADER.size:])
        response = self.service.handle(request)
        return wire.decode_body(wire.encode(response)[wire.HEADER.size:])
