"""Bilateral producer/consumer negotiation.

A consumer opens a session with a proposal; the parties then alternate
accepting, rejecting or countering until the session is Agreed or Rejected.
A counter that would push the history past ``max_rounds`` rejects the
session instead.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, replace
from decimal import Decimal
from enum import Enum
from typing import TYPE_CHECKING, Optional, Protocol, Union

from .artifact import Bundle, Filter, apply_filter, issue_bundle
from .errors import (
    MalformedProposal,
    NotAgreed,
    SelfNegotiation,
    SessionClosed,
    StaleRound,
    StrategyTimeout,
    WrongTurn,
)
from .model import FactCategory, Record, Subject
from .policy import UsagePolicy, parse_policy, render_policy

if TYPE_CHECKING:
    from .audit import AuditLog

DEFAULT_MAX_ROUNDS = 16


class Party(str, Enum):
    PRODUCER = "producer"
    CONSUMER = "consumer"

    @property
    def other(self) -> "Party":
        return Party.CONSUMER if self is Party.PRODUCER else Party.PRODUCER


class SessionState(str, Enum):
    AWAITING_PRODUCER = "AwaitingProducer"
    AWAITING_CONSUMER = "AwaitingConsumer"
    AGREED = "Agreed"
    REJECTED = "Rejected"

    @property
    def terminal(self) -> bool:
        return self in (SessionState.AGREED, SessionState.REJECTED)


_AWAITING = {Party.PRODUCER: SessionState.AWAITING_PRODUCER,
             Party.CONSUMER: SessionState.AWAITING_CONSUMER}


@dataclass(frozen=True)
class Proposal:
    proposal_id: str
    from_party: Party
    requested_categories: frozenset[FactCategory]
    policy_terms: UsagePolicy
    price: Decimal
    round: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "from_party", Party(self.from_party))
        object.__setattr__(self, "price", Decimal(self.price))
        if self.price < 0:
            raise MalformedProposal("price must be non-negative")
        if self.round < 1:
            raise MalformedProposal("rounds start at 1")

    def countered(self, party: Party, round: int, *, price=None, categories=None,
                  policy: UsagePolicy | None = None) -> "Proposal":
        """Copy of these terms from ``party`` at ``round``, with any term changed."""
        return Proposal(
            proposal_id=f"{self.proposal_id.split('/')[0]}/{round}",
            from_party=party,
            requested_categories=self.requested_categories if categories is None else frozenset(categories),
            policy_terms=self.policy_terms if policy is None else policy,
            price=self.price if price is None else Decimal(price),
            round=round,
        )

    def to_dict(self) -> dict:
        return {
            "proposal_id": self.proposal_id,
            "from_party": self.from_party.value,
            "requested_categories": sorted(c.value for c in self.requested_categories),
            "policy_id": self.policy_terms.policy_id,
            "issuer": self.policy_terms.issuer,
            "policy": render_policy(self.policy_terms),
            "price": str(self.price),
            "round": self.round,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Proposal":
        return cls(
            proposal_id=data["proposal_id"],
            from_party=Party(data["from_party"]),
            requested_categories=frozenset(FactCategory(c) for c in data["requested_categories"]),
            policy_terms=parse_policy(data["policy"], policy_id=data["policy_id"],
                                      issuer=data["issuer"]),
            price=Decimal(data["price"]),
            round=int(data["round"]),
        )


@dataclass(frozen=True)
class Accept:
    pass


@dataclass(frozen=True)
class Reject:
    reason: str = ""


@dataclass(frozen=True)
class Counter:
    proposal: Proposal


Response = Union[Accept, Reject, Counter]


@dataclass(frozen=True)
class NegotiationSession:
    session_id: str
    producer: str
    consumer: str
    record_id: str
    state: SessionState
    history: tuple[Proposal, ...]
    max_rounds: int = DEFAULT_MAX_ROUNDS

    @property
    def awaiting(self) -> Optional[Party]:
        if self.state is SessionState.AWAITING_PRODUCER:
            return Party.PRODUCER
        if self.state is SessionState.AWAITING_CONSUMER:
            return Party.CONSUMER
        return None

    @property
    def last(self) -> Proposal:
        return self.history[-1]

    @property
    def agreed_terms(self) -> Proposal:
        if self.state is not SessionState.AGREED:
            raise NotAgreed(f"session {self.session_id} is {self.state.value}")
        return self.history[-1]

    def party_id(self, party: Party) -> str:
        return self.producer if party is Party.PRODUCER else self.consumer

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "producer": self.producer,
            "consumer": self.consumer,
            "record_id": self.record_id,
            "state": self.state.value,
            "max_rounds": self.max_rounds,
            "history": [p.to_dict() for p in self.history],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NegotiationSession":
        return cls(
            session_id=data["session_id"],
            producer=data["producer"],
            consumer=data["consumer"],
            record_id=data["record_id"],
            state=SessionState(data["state"]),
            history=tuple(Proposal.from_dict(p) for p in data["history"]),
            max_rounds=int(data["max_rounds"]),
        )


def _log_event(log, session: NegotiationSession, actor: str, event: str, now: int, **extra) -> None:
    if log is None:
        return
    detail = {"session_id": session.session_id, "event": event, "state": session.state.value,
              "round": session.last.round, "record_id": session.record_id, **extra}
    log.append(timestamp=now, actor=actor, event_kind="session_event", detail=detail)


def open_session(
    producer: str,
    consumer: str,
    record_id: str,
    initial: Proposal,
    *,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    session_id: str | None = None,
    log: AuditLog | None = None,
    now: int = 0,
) -> NegotiationSession:
    if producer == consumer:
        raise SelfNegotiation(f"{producer} cannot negotiate with itself")
    if initial.from_party is not Party.CONSUMER:
        raise MalformedProposal("only consumers open negotiations")
    if initial.round != 1:
        raise MalformedProposal("the opening proposal must be round 1")
    if max_rounds < 1:
        raise ValueError("max_rounds must be positive")
    if session_id is None:
        session_id = "ses-" + hashlib.sha256(
            f"{producer}\x1f{consumer}\x1f{record_id}\x1f{initial.proposal_id}".encode()
        ).hexdigest()[:12]
    session = NegotiationSession(session_id, producer, consumer, record_id,
                                 SessionState.AWAITING_PRODUCER, (initial,), max_rounds)
    _log_event(log, session, consumer, "opened", now, proposal=initial.to_dict())
    return session


def respond(
    session: NegotiationSession,
    party: Party,
    response: Response,
    *,
    log: AuditLog | None = None,
    now: int = 0,
) -> NegotiationSession:
    """Apply one move by ``party``. Terminal sessions never change."""
    party = Party(party)
    if session.state.terminal:
        raise SessionClosed(f"session {session.session_id} is {session.state.value}")
    if party is not session.awaiting:
        raise WrongTurn(f"awaiting {session.awaiting.value}, not {party.value}")
    actor = session.party_id(party)

    if isinstance(response, Accept):
        out = replace(session, state=SessionState.AGREED)
        _log_event(log, out, actor, "accepted", now, price=str(out.last.price))
        return out
    if isinstance(response, Reject):
        out = replace(session, state=SessionState.REJECTED)
        _log_event(log, out, actor, "rejected", now, reason=response.reason)
        return out
    if not isinstance(response, Counter):
        raise TypeError(f"not a negotiation response: {response!r}")

    proposal = response.proposal
    if proposal.from_party is not party:
        raise WrongTurn("a counter must come from the responding party")
    if proposal.round != session.last.round + 1:
        raise StaleRound(f"expected round {session.last.round + 1}, got {proposal.round}")
    if len(session.history) >= session.max_rounds:
        out = replace(session, state=SessionState.REJECTED)
        _log_event(log, out, actor, "round_limit", now)
        return out
    out = replace(session, state=_AWAITING[party.other], history=session.history + (proposal,))
    _log_event(log, out, actor, "countered", now, proposal=proposal.to_dict())
    return out


# strategies

class Strategy(Protocol):
    def respond(self, session: NegotiationSession, party: Party, rng: random.Random) -> Response: ...


def _wants_more(party: Party) -> bool:
    return party is Party.PRODUCER


@dataclass(frozen=True)
class AcceptAnything:
    def respond(self, session, party, rng):
        return Accept()


@dataclass(frozen=True)
class AcceptThreshold:
    """Accept any price on the right side of ``reserve``; otherwise counter at it."""

    reserve: Decimal

    def respond(self, session, party, rng):
        price = session.last.price
        reserve = Decimal(self.reserve)
        if (price >= reserve) if _wants_more(party) else (price <= reserve):
            return Accept()
        return Counter(session.last.countered(party, session.last.round + 1, price=reserve))


@dataclass(frozen=True)
class LinearConcession:
    """Offer ``start`` in round 1, conceding ``step`` per round up to ``limit``.

    The schedule is indexed by session round. The strategy accepts an offer
    at least as good as what it would itself propose this round.
    """

    start: Decimal
    step: Decimal
    limit: Decimal

    def offer(self, party: Party, round: int) -> Decimal:
        start, step, limit = Decimal(self.start), Decimal(self.step), Decimal(self.limit)
        if _wants_more(party):
            return max(start - (round - 1) * step, limit)
        return min(start + (round - 1) * step, limit)

    def respond(self, session, party, rng):
        rnd = session.last.round + 1
        mine = self.offer(party, rnd)
        price = session.last.price
        if (price >= mine) if _wants_more(party) else (price <= mine):
            return Accept()
        return Counter(session.last.countered(party, rnd, price=mine))


def run_automated(
    session: NegotiationSession,
    producer_strategy: Strategy,
    consumer_strategy: Strategy,
    seed: int = 0,
    *,
    log: AuditLog | None = None,
    now: int = 0,
) -> NegotiationSession:
    """Drive a fresh session with two strategies until it terminates."""
    if len(session.history) != 1 or session.state is not SessionState.AWAITING_PRODUCER:
        raise ValueError("run_automated needs a freshly opened session")
    rng = random.Random(seed)
    strategies = {Party.PRODUCER: producer_strategy, Party.CONSUMER: consumer_strategy}
    for _ in range(session.max_rounds + 1):
        party = session.awaiting
        if party is None:
            return session
        move = strategies[party].respond(session, party, rng)
        if not isinstance(move, (Accept, Reject, Counter)):
            raise StrategyTimeout(f"{party.value} strategy produced no decision")
        session = respond(session, party, move, log=log, now=now)
    if not session.state.terminal:
        raise StrategyTimeout("negotiation exceeded its round budget")
    return session


def conclude_to_bundle(
    session: NegotiationSession,
    record: Record,
    now: int,
    *,
    consumer: Subject | None = None,
    log: AuditLog | None = None,
) -> Bundle:
    """Filter the record to the agreed categories and license it on the agreed terms."""
    terms = session.agreed_terms
    if record.record_id != session.record_id:
        raise ValueError(f"session is about {session.record_id}, not {record.record_id}")
    if record.owner != session.producer:
        raise ValueError("only the record owner can license it")
    if consumer is None:
        consumer = Subject(session.consumer)
    elif consumer.subject_id != session.consumer:
        raise ValueError("consumer does not match the session")
    flt = Filter(f"flt-{session.session_id}", frozenset(terms.requested_categories))
    fr = apply_filter(record, flt)
    return issue_bundle(fr, terms.policy_terms, session.producer, consumer, now,
                        price=terms.price, log=log)

