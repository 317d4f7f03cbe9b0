"""End-to-end scenario drivers over an in-process marketplace service.

Fixtures are plain-text directories: ``subjects.tsv``, ``facts.tsv``, policy
files and a ``scenario.ini``. Drivers talk to the service only through its
message interface and print a transcript that depends on nothing but the
fixture and the seed.
"""

from __future__ import annotations

import configparser
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import timestamps
from .bundle_io import bundle_digest, parse_bundle
from .marketplace import LocalClient, MarketplaceService
from .model import FactCategory
from .negotiation import (
    AcceptThreshold,
    Counter,
    LinearConcession,
    NegotiationSession,
    Party,
    Proposal,
    Reject,
)
from .policy import parse_policy

FIXTURE_ROOT = Path(__file__).with_name("scenarios")
SCENARIOS = ("marketplace_negotiation", "broker_aggregation", "remote_access",
             "employer_monitoring", "custom_care")


class ScenarioFailure(Exception):
    """An invariant the scenario relies on did not hold."""


@dataclass(frozen=True)
class Scenario:
    name: str
    fixture_path: Path
    seed: int = 0

    @classmethod
    def named(cls, name: str, seed: int = 0, fixture_root: Path | None = None) -> "Scenario":
        if name not in SCENARIOS:
            raise ValueError(f"unknown scenario {name!r}")
        return cls(name, (fixture_root or FIXTURE_ROOT) / name, seed)


@dataclass
class Fixture:
    root: Path
    subjects: list[dict] = field(default_factory=list)
    facts: list[dict] = field(default_factory=list)
    config: configparser.ConfigParser = field(default_factory=configparser.ConfigParser)

    @classmethod
    def load(cls, root: Path) -> "Fixture":
        if not root.is_dir():
            raise FileNotFoundError(f"fixture directory {root} not found")
        fx = cls(root)
        for row in _tsv(root / "subjects.tsv", 4):
            sid, name, roles, params = row
            fx.subjects.append({
                "subject_id": sid,
                "display_name": name,
                "verified_roles": [] if roles == "-" else roles.split(","),
                "parameters": {} if params == "-" else dict(kv.split("=", 1) for kv in params.split(",")),
            })
        for row in _tsv(root / "facts.tsv", 8):
            rid, owner, fid, cat, author, role, at, body = row
            fx.facts.append({"record_id": rid, "owner": owner, "fact_id": fid, "category": cat,
                             "author": author, "role": role, "recorded_at": timestamps.parse(at),
                             "body": body})
        fx.config.read(root / "scenario.ini", encoding="utf-8")
        return fx

    def policy_text(self, name: str) -> str:
        return (self.root / name).read_text(encoding="utf-8")


def _tsv(path: Path, width: int) -> list[list[str]]:
    rows = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != width:
            raise ValueError(f"{path}:{n}: expected {width} tab-separated fields")
        rows.append(parts)
    return rows


def _cats(text: str) -> list[str]:
    return [FactCategory(c.strip()).value for c in text.split(",") if c.strip()]


class Driver:
    def __init__(self, client: LocalClient, out: Callable[[str], None]):
        self.client = client
        self.out = out

    def say(self, text: str) -> None:
        self.out(text)

    def call(self, kind: str, **payload) -> dict:
        response = self.client.call(kind, **payload)
        if not response["ok"]:
            err = response["error"]
            raise ScenarioFailure(f"{kind} failed: {err['type']}: {err['message']}")
        return response["payload"]

    def try_call(self, kind: str, **payload) -> dict:
        return self.client.call(kind, **payload)

    def check(self, condition: bool, message: str) -> None:
        if not condition:
            raise ScenarioFailure(message)

    @staticmethod
    def ctx(subject: str, role: str, at: int, location: str, device: str) -> dict:
        return {"subject_id": subject, "role": role,
                "environment": {"Date": at, "Location": location, "DeviceType": device}}

    def populate(self, fx: Fixture) -> None:
        for s in fx.subjects:
            self.call("register_subject", credentials_verified=True, **s)
        self.say(f"registered {len(fx.subjects)} subjects")
        seen = set()
        for f in fx.facts:
            if f["record_id"] not in seen:
                self.call("create_record", record_id=f["record_id"], owner=f["owner"])
                seen.add(f["record_id"])
            fact = {"fact_id": f["fact_id"], "category": f["category"], "author_subject": f["author"],
                    "author_role": f["role"], "recorded_at": f["recorded_at"], "body": f["body"]}
            ctx = self.ctx(f["author"], f["role"], f["recorded_at"], "clinic", "certified")
            self.call("append_fact", record_id=f["record_id"], fact=fact, context=ctx)
        self.say(f"recorded {len(fx.facts)} facts in {len(seen)} records")

    def decide(self, label: str, **payload) -> bool:
        d = self.call("request_use", **payload)
        extra = ""
        if d["outcome"] == "permit":
            obligations = []
            if d["price"] is not None:
                obligations.append(f"price {d['price']}")
            if d["attribution"]:
                obligations.append("attribution")
            extra = f" [{', '.join(obligations)}]" if obligations else ""
        self.say(f"  {label}: {d['outcome']} ({d['reason']}){extra}")
        return d["outcome"] == "permit"

    def fetch(self, session_id: str, consumer: str, now: int):
        got = self.call("fetch_bundle", session_id=session_id, subject_id=consumer, now=now)
        bundle = parse_bundle(got["text"], got["digest"])
        self.check(bundle_digest(got["text"]) == got["digest"], "bundle digest mismatch")
        return bundle, got

    def agree_directly(self, producer: str, consumer: str, record: str, policy_text: str,
                       categories: list[str], price: str, now: int) -> str:
        """Consumer proposes the fixture terms and the producer accepts them."""
        policy = parse_policy(policy_text, issuer=producer)
        proposal = Proposal(f"prop-{consumer}-{record}", Party.CONSUMER,
                            frozenset(FactCategory(c) for c in categories), policy, price, 1)
        session = self.call("open_session", producer=producer, consumer=consumer,
                            record_id=record, proposal=proposal.to_dict(), now=now)
        session = self.call("respond", session_id=session["session_id"], party="producer",
                            subject_id=producer, response="accept", now=now)
        self.check(session["state"] == "Agreed", "direct agreement failed")
        return session["session_id"]

    def finish(self) -> None:
        report = self.call("verify_audit")
        self.check(report["ok"], f"audit chain {report['report']}")
        self.say(f"audit: {report['report']} ({report['length']} entries)")


def _strategy(section: configparser.SectionProxy, rng: random.Random):
    kind = section["kind"]
    if kind == "threshold":
        return AcceptThreshold(section["reserve"])
    if kind == "linear":
        jitter = rng.randint(0, section.getint("seed_jitter", 0))
        return LinearConcession(int(section["start"]) + jitter, section["step"], section["limit"])
    raise ValueError(f"unknown strategy kind {kind!r}")


# scenario drivers

def _marketplace_negotiation(d: Driver, fx: Fixture, seed: int) -> None:
    cfg = fx.config["scenario"]
    rng = random.Random(seed)
    producer_strategy = _strategy(fx.config["producer_strategy"], rng)
    consumer_strategy = _strategy(fx.config["consumer_strategy"], rng)
    start = timestamps.parse(cfg["start"])
    producer, consumer, record = cfg["producer"], cfg["consumer"], cfg["record"]
    categories = _cats(cfg["categories"])
    d.populate(fx)

    d.call("create_listing", listing_id=f"lst-{producer}", producer=producer, record_id=record,
           advertised_categories=categories, blurb=cfg["listing_blurb"], contact=f"mailto:{producer}")
    found = d.call("search", categories=categories)["listings"]
    d.say(f"search {categories}: {[x['contact'] for x in found]}")
    d.check(any(x["producer"] == producer for x in found), "producer not found by search")

    policy = parse_policy(fx.policy_text(cfg["terms"]), issuer=producer)
    opening = consumer_strategy.offer(Party.CONSUMER, 1)
    proposal = Proposal("prop-1", Party.CONSUMER, frozenset(FactCategory(c) for c in categories),
                        policy, opening, 1)
    raw = d.call("open_session", producer=producer, consumer=consumer, record_id=record,
                 proposal=proposal.to_dict(), now=start)
    d.say(f"session {raw['session_id']} opened: consumer offers {opening}")
    strategies = {Party.PRODUCER: producer_strategy, Party.CONSUMER: consumer_strategy}
    move_rng = random.Random(seed)
    session = NegotiationSession.from_dict(raw)
    while not session.state.terminal:
        party = session.awaiting
        move = strategies[party].respond(session, party, move_rng)
        payload = {"session_id": session.session_id, "party": party.value,
                   "subject_id": session.party_id(party), "now": start}
        if isinstance(move, Counter):
            payload.update(response="counter", proposal=move.proposal.to_dict())
            d.say(f"  round {move.proposal.round}: {party.value} counters at {move.proposal.price}")
        elif isinstance(move, Reject):
            payload.update(response="reject", reason=move.reason)
            d.say(f"  {party.value} rejects")
        else:
            payload.update(response="accept")
            d.say(f"  {party.value} accepts {session.last.price}")
        session = NegotiationSession.from_dict(d.call("respond", **payload))
    d.say(f"session {session.state.value} after {len(session.history)} proposals")
    d.check(session.state.value == "Agreed", "negotiation did not reach agreement")

    bundle, got = d.fetch(session.session_id, consumer, start)
    d.say(f"bundle {bundle.bundle_id} digest {got['digest'][:16]} price {bundle.license.price}")
    d.say(f"  facts: {sorted(f.fact_id for f in bundle.facts)}")
    d.check(bundle.license.price == session.last.price, "license price differs from agreement")
    d.check(bundle.license.policy == session.last.policy_terms, "license terms differ from agreement")

    env = (cfg["location"], cfg["device"])
    use_at = timestamps.parse(cfg["use_at"])
    late = timestamps.parse(cfg["after_expiry"])
    ok = d.decide("read lab_marker", bundle_id=bundle.bundle_id, action="read",
                  categories=categories, context=d.ctx(consumer, "researcher", use_at, *env), now=use_at)
    d.check(ok, "licensed read was refused")
    ok = d.decide("read psychiatric", bundle_id=bundle.bundle_id, action="read",
                  categories=["psychiatric"], context=d.ctx(consumer, "researcher", use_at, *env),
                  now=use_at)
    d.check(not ok, "unlicensed category was readable")
    ok = d.decide("redistribute lab_marker", bundle_id=bundle.bundle_id, action="redistribute",
                  categories=categories, context=d.ctx(consumer, "researcher", use_at, *env), now=use_at)
    d.check(not ok, "redistribution was not denied")
    ok = d.decide("read lab_marker after expiry", bundle_id=bundle.bundle_id, action="read",
                  categories=categories, context=d.ctx(consumer, "researcher", late, *env), now=late)
    d.check(not ok, "expired license still permitted use")
    d.finish()


def _broker_aggregation(d: Driver, fx: Fixture, seed: int) -> None:
    cfg = fx.config["scenario"]
    broker, researcher = cfg["broker"], cfg["researcher"]
    start, use_at = timestamps.parse(cfg["start"]), timestamps.parse(cfg["use_at"])
    env = (cfg["location"], cfg["device"])
    d.populate(fx)

    bundles: dict[str, str] = {}
    for producer, spec in fx.config["acquisitions"].items():
        record, policy_file, price = (x.strip() for x in spec.split(","))
        sid = d.agree_directly(producer, broker, record, fx.policy_text(policy_file),
                               ["lab_marker"], price, start)
        bundle, _ = d.fetch(sid, broker, start)
        bundles[producer] = bundle.bundle_id
        d.say(f"acquired {record} from {producer} at {price} under {bundle.license.policy.policy_id}")

    broker_ctx = d.ctx(broker, "broker", use_at, *env)
    variants = fx.config["variants"]

    members = [m.strip() for m in variants["compliant"].split(",")]
    ids = [bundles[m] for m in members]
    d.say(f"variant compliant: aggregate {members}")
    agg = d.call("aggregate", bundle_ids=ids, action="read", context=broker_ctx, now=use_at)
    d.say(f"  aggregate set: {len(agg['elements'])} elements, categories {agg['categories']}")
    d.check(len(agg["elements"]) == len(members), "aggregate lost an element")
    split = d.call("attribute", bundle_ids=ids, action="read", context=broker_ctx,
                   payment=cfg["payment"], now=use_at)["split"]
    d.say(f"  compensation for {cfg['payment']}: " + ", ".join(f"{o}={a}" for o, a in split))
    total = sum(round(float(a) * 100) for _, a in split)
    d.check(total == round(float(cfg["payment"]) * 100), "compensation not conserved")
    resale = d.call("redistribute", bundle_ids=ids, action="redistribute", context=broker_ctx,
                    new_consumer=researcher, now=use_at)
    rb = parse_bundle(resale["text"], resale["digest"])
    d.say(f"  resold as {rb.bundle_id} to {researcher}; provenance: "
          + ", ".join(f"{p.owner}:{p.share}" for p in rb.license.provenance))
    owners = {p.owner for p in rb.license.provenance}
    d.check(owners == set(members) | {broker}, "provenance does not list every owner and the broker")
    d.decide("researcher reads pooled lab_marker", bundle_id=rb.bundle_id, action="read",
             categories=["lab_marker"], context=d.ctx(researcher, "researcher", use_at, *env), now=use_at)

    members = [m.strip() for m in variants["conflicting"].split(",")]
    ids = [bundles[m] for m in members]
    d.say(f"variant conflicting: aggregate {members}")
    response = d.try_call("aggregate", bundle_ids=ids, action="read", context=broker_ctx, now=use_at)
    d.check(not response["ok"] and response["error"]["type"] == "AggregationDenied",
            "conflicting aggregate was not refused")
    for pid, decision in response["error"]["conflicts"]:
        if decision["outcome"] == "deny":
            d.say(f"  conflict cause: {pid}: {decision['reason']}")
    d.finish()


def _remote_access(d: Driver, fx: Fixture, seed: int) -> None:
    cfg = fx.config["scenario"]
    owner, record = cfg["owner"], cfg["record"]
    start = timestamps.parse(cfg["start"])
    during, after = timestamps.parse(cfg["during"]), timestamps.parse(cfg["after_expiry"])
    d.populate(fx)
    for section in (s for s in fx.config.sections() if s.startswith("grant:")):
        g = fx.config[section]
        role = section.split(":", 1)[1]
        cats = _cats(g["categories"])
        sid = d.agree_directly(owner, g["subject"], record, fx.policy_text(g["policy"]), cats, "0", start)
        bundle, _ = d.fetch(sid, g["subject"], start)
        d.say(f"{role} {g['subject']} granted {cats} as {bundle.bundle_id}")
        env = (g["location"], g["device"])
        for cat in ("vaccination", "psychiatric", "genetic"):
            expected = cat in cats
            ok = d.decide(f"read {cat} while granted", bundle_id=bundle.bundle_id, action="read",
                          categories=[cat], context=d.ctx(g["subject"], role, during, *env), now=during)
            d.check(ok == expected, f"{role} read of {cat} should be {'permit' if expected else 'deny'}")
        ok = d.decide("read vaccination after expiry", bundle_id=bundle.bundle_id, action="read",
                      categories=["vaccination"], context=d.ctx(g["subject"], role, after, *env), now=after)
        d.check(not ok, "grant was not revoked by expiry")
        if role == "physician":
            ok = d.decide("read vaccination from a mobile device", bundle_id=bundle.bundle_id,
                          action="read", categories=["vaccination"],
                          context=d.ctx(g["subject"], role, during, g["location"], "mobile"), now=during)
            d.check(not ok, "uncertified device was permitted")
    d.finish()


def _employer_monitoring(d: Driver, fx: Fixture, seed: int) -> None:
    cfg = fx.config["scenario"]
    owner, employer, record = cfg["owner"], cfg["employer"], cfg["record"]
    start = timestamps.parse(cfg["start"])
    during, outside = timestamps.parse(cfg["during"]), timestamps.parse(cfg["outside"])
    env = (cfg["location"], cfg["device"])
    d.populate(fx)
    cats = _cats(cfg["categories"])
    sid = d.agree_directly(owner, employer, record, fx.policy_text(cfg["policy"]), cats, "0", start)
    bundle, _ = d.fetch(sid, employer, start)
    d.say(f"employer bundle {bundle.bundle_id} holds {sorted(f.fact_id for f in bundle.facts)}")
    d.check({f.category.value for f in bundle.facts} == set(cats), "bundle leaks withheld categories")
    ok = d.decide("read lab_marker in plan year", bundle_id=bundle.bundle_id, action="read",
                  categories=["lab_marker"], context=d.ctx(employer, "employer", during, *env), now=during)
    d.check(ok, "screening markers were refused")
    for cat in ("prescription", "treatment", "psychiatric"):
        ok = d.decide(f"read {cat}", bundle_id=bundle.bundle_id, action="read", categories=[cat],
                      context=d.ctx(employer, "employer", during, *env), now=during)
        d.check(not ok, f"{cat} was disclosed to the employer")
    ok = d.decide("read lab_marker after plan year", bundle_id=bundle.bundle_id, action="read",
                  categories=["lab_marker"], context=d.ctx(employer, "employer", outside, *env), now=outside)
    d.check(not ok, "plan-year window not enforced")
    d.finish()


def _custom_care(d: Driver, fx: Fixture, seed: int) -> None:
    cfg = fx.config["scenario"]
    owner, pharmacy, record = cfg["owner"], cfg["pharmacy"], cfg["record"]
    start, use_at = timestamps.parse(cfg["start"]), timestamps.parse(cfg["use_at"])
    d.populate(fx)
    cats = _cats(cfg["categories"])
    sid = d.agree_directly(owner, pharmacy, record, fx.policy_text(cfg["policy"]), cats, "12", start)
    bundle, _ = d.fetch(sid, pharmacy, start)
    d.say(f"pharmacy bundle {bundle.bundle_id} holds {sorted(f.fact_id for f in bundle.facts)}")
    ok = d.decide("read medication history (certified)", bundle_id=bundle.bundle_id, action="read",
                  categories=["prescription", "treatment"],
                  context=d.ctx(pharmacy, "physician", use_at, cfg["location"], "certified"), now=use_at)
    d.check(ok, "certified pharmacy read was refused")
    ok = d.decide("read medication history (mobile)", bundle_id=bundle.bundle_id, action="read",
                  categories=["prescription", "treatment"],
                  context=d.ctx(pharmacy, "physician", use_at, cfg["location"], "mobile"), now=use_at)
    d.check(not ok, "mobile read was permitted")
    ok = d.decide("read psychiatric", bundle_id=bundle.bundle_id, action="read",
                  categories=["psychiatric"],
                  context=d.ctx(pharmacy, "physician", use_at, cfg["location"], "certified"), now=use_at)
    d.check(not ok, "psychiatric history was disclosed")
    physician = cfg["physician"]
    ok = d.decide("another physician uses the bundle", bundle_id=bundle.bundle_id, action="read",
                  categories=["prescription"],
                  context=d.ctx(physician, "physician", use_at, cfg["location"], "certified"), now=use_at)
    d.check(not ok, "non-licensee was permitted")
    d.finish()


DRIVERS = {
    "marketplace_negotiation": _marketplace_negotiation,
    "broker_aggregation": _broker_aggregation,
    "remote_access": _remote_access,
    "employer_monitoring": _employer_monitoring,
    "custom_care": _custom_care,
}


def run_scenario(scenario: Scenario, store: Optional[Path] = None) -> tuple[list[str], int]:
    """Run one scenario; returns (transcript lines, exit code)."""
    lines: list[str] = [f"scenario {scenario.name} seed {scenario.seed}"]
    fx = Fixture.load(Path(scenario.fixture_path))
    service = MarketplaceService(store, clock=lambda: 0)
    try:
        driver = Driver(LocalClient(service), lines.append)
        DRIVERS[scenario.name](driver, fx, scenario.seed)
    except ScenarioFailure as exc:
        lines.append(f"FAILED: {exc}")
        return lines, 1
    finally:
        service.close()
    lines.append("result: ok")
    return lines, 0


__all__ = ["SCENARIOS", "Scenario", "ScenarioFailure", "run_scenario"]
