import random
from decimal import Decimal
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from oracles import crossing_outcome
from phrusage.audit import AuditLog
from phrusage.errors import (
    MalformedProposal, NotAgreed, SelfNegotiation, SessionClosed, StaleRound, StrategyTimeout, WrongTurn,
)
from phrusage.model import Fact, FactCategory, Record, RoleKind, Subject
from phrusage.negotiation import (
    Accept, AcceptAnything, AcceptThreshold, Counter, LinearConcession, NegotiationSession, Party,
    Proposal, Reject, SessionState, conclude_to_bundle, open_session, respond, run_automated,
)
from phrusage.policy import parse_policy

TERMS = parse_policy("permit read to researcher scope lab_marker\n", issuer="pat")
LAB = frozenset({FactCategory.LAB_MARKER})


def opening(price=5):
    return Proposal("p", Party.CONSUMER, LAB, TERMS, price, 1)


def fresh(max_rounds=16, price=5):
    return open_session("pat", "lab", "rec", opening(price), max_rounds=max_rounds)


class TestStateMachine:
    def test_accept(self):
        s = respond(fresh(), Party.PRODUCER, Accept())
        assert s.state is SessionState.AGREED and s.agreed_terms.price == 5

    def test_counter_then_accept(self):
        s = fresh()
        s = respond(s, Party.PRODUCER, Counter(s.last.countered(Party.PRODUCER, 2, price=8)))
        assert s.state is SessionState.AWAITING_CONSUMER
        s = respond(s, Party.CONSUMER, Accept())
        assert s.agreed_terms.price == 8 and len(s.history) == 2

    def test_reject(self):
        s = respond(fresh(), Party.PRODUCER, Reject("no"))
        assert s.state is SessionState.REJECTED
        with pytest.raises(NotAgreed):
            s.agreed_terms

    def test_terminal_sessions_are_closed(self):
        s = respond(fresh(), Party.PRODUCER, Accept())
        with pytest.raises(SessionClosed):
            respond(s, Party.CONSUMER, Accept())

    def test_wrong_turn(self):
        with pytest.raises(WrongTurn):
            respond(fresh(), Party.CONSUMER, Accept())

    def test_stale_round(self):
        s = fresh()
        with pytest.raises(StaleRound):
            respond(s, Party.PRODUCER, Counter(s.last.countered(Party.PRODUCER, 1)))

    def test_counter_from_wrong_party(self):
        s = fresh()
        with pytest.raises(WrongTurn):
            respond(s, Party.PRODUCER, Counter(s.last.countered(Party.CONSUMER, 2)))

    def test_round_limit_rejects(self):
        s = fresh(max_rounds=2)
        s = respond(s, Party.PRODUCER, Counter(s.last.countered(Party.PRODUCER, 2, price=9)))
        s = respond(s, Party.CONSUMER, Counter(s.last.countered(Party.CONSUMER, 3, price=6)))
        assert s.state is SessionState.REJECTED and len(s.history) == 2

    def test_self_negotiation(self):
        with pytest.raises(SelfNegotiation):
            open_session("pat", "pat", "rec", opening())

    def test_producer_cannot_open(self):
        with pytest.raises(MalformedProposal):
            open_session("pat", "lab", "rec", Proposal("p", Party.PRODUCER, LAB, TERMS, 1, 1))

    def test_negative_price(self):
        with pytest.raises(MalformedProposal):
            opening(-1)

    def test_events_are_logged(self):
        log = AuditLog()
        s = open_session("pat", "lab", "rec", opening(), log=log)
        respond(s, Party.PRODUCER, Accept(), log=log)
        events = [e.payload()["event"] for e in log.entries()]
        assert events == ["opened", "accepted"]
        assert {e.event_kind for e in log.entries()} == {"session_event"}

    def test_dict_roundtrip(self):
        s = fresh()
        s = respond(s, Party.PRODUCER, Counter(s.last.countered(Party.PRODUCER, 2, price="7.25")))
        assert NegotiationSession.from_dict(s.to_dict()) == s


class TestStrategies:
    def test_concession_meets_reserve(self):
        consumer = LinearConcession(4, 1, 12)
        s = fresh(price=consumer.offer(Party.CONSUMER, 1))
        s = run_automated(s, AcceptThreshold(9), consumer, seed=1)
        assert s.state is SessionState.AGREED and s.last.price == 9 and len(s.history) == 6

    def test_accept_anything(self):
        s = run_automated(fresh(), AcceptAnything(), AcceptAnything())
        assert s.state is SessionState.AGREED and len(s.history) == 1

    def test_reserve_above_limit_exhausts_rounds(self):
        s = run_automated(fresh(max_rounds=8, price=1), AcceptThreshold(20), LinearConcession(1, 1, 5))
        assert s.state is SessionState.REJECTED and len(s.history) == 8

    def test_misbehaving_strategy(self):
        class Mute:
            def respond(self, session, party, rng):
                return None

        with pytest.raises(StrategyTimeout):
            run_automated(fresh(), Mute(), AcceptAnything())

    def test_needs_fresh_session(self):
        s = respond(fresh(), Party.PRODUCER, Accept())
        with pytest.raises(ValueError):
            run_automated(s, AcceptAnything(), AcceptAnything())

    @given(st.integers(0, 20), st.sampled_from(["0", "0.5", "1", "3"]), st.integers(0, 30),
           st.integers(0, 30), st.integers(1, 20), st.integers(0, 2**16))
    def test_closed_form(self, start, step, limit, reserve, max_rounds, seed):
        consumer = LinearConcession(Decimal(start), Decimal(step), Decimal(limit))
        s = fresh(max_rounds=max_rounds, price=consumer.offer(Party.CONSUMER, 1))
        s = run_automated(s, AcceptThreshold(Decimal(reserve)), consumer, seed=seed)
        state, price, proposals = crossing_outcome(start, step, limit, reserve, max_rounds)
        assert s.state.value == state
        assert len(s.history) <= max_rounds
        if state == "Agreed":
            assert Fraction(str(s.last.price)) == price and len(s.history) == proposals


class TestConclude:
    def _record(self):
        facts = (Fact("a", FactCategory.LAB_MARKER, "dr", RoleKind.PHYSICIAN, 1, "LDL"),
                 Fact("b", FactCategory.PSYCHIATRIC, "dr", RoleKind.PHYSICIAN, 2, "dx"))
        return Record("rec", "pat", facts, 2)

    def test_bundle_matches_agreement(self):
        s = respond(fresh(price="9.00"), Party.PRODUCER, Accept())
        b = conclude_to_bundle(s, self._record(), 100, consumer=Subject("lab"))
        assert {f.fact_id for f in b.facts} == {"a"}
        assert b.license.price == Decimal("9.00") and b.license.policy == TERMS

    def test_requires_agreement(self):
        with pytest.raises(NotAgreed):
            conclude_to_bundle(fresh(), self._record(), 100)

    def test_wrong_record(self):
        s = respond(fresh(), Party.PRODUCER, Accept())
        with pytest.raises(ValueError):
            conclude_to_bundle(s, Record("other", "pat"), 100)


def test_linear_concession_schedule_is_monotone():
    rng = random.Random(3)
    for _ in range(50):
        c = LinearConcession(rng.randint(0, 9), rng.randint(0, 3), rng.randint(0, 20))
        offers = [c.offer(Party.CONSUMER, r) for r in range(1, 12)]
        assert offers == sorted(offers)
        asks = [c.offer(Party.PRODUCER, r) for r in range(1, 12)]
        assert asks == sorted(asks, reverse=True)
