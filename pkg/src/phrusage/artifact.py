"""Filtered records, licenses, bundles, aggregation and compensation.

A filter only ever drops facts, so every filtered payload is a subset of the
record it came from. Bundles pair a payload with a license; aggregates pair
several payloads with all of their licenses and are usable only where every
constituent license agrees.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from decimal import ROUND_FLOOR, Decimal
from fractions import Fraction
from typing import TYPE_CHECKING, Iterable, Optional, Sequence, Union

from .errors import (
    AggregationDenied,
    ExpiredTerms,
    RedistributionDenied,
    StaticScopeMismatch,
)
from .model import Context, Fact, FactCategory, Record, RoleKind, Subject, current_facts
from .policy import (
    Action,
    AnyPolicy,
    Clause,
    CompositePolicy,
    Decision,
    Effect,
    Op,
    UsagePolicy,
    classify_clauses,
    evaluate,
    evaluate_clauses,
    resolve_static,
)

if TYPE_CHECKING:
    from .audit import AuditLog

NOT_LICENSEE = "not licensee"
CENT = Decimal("0.01")
DEFAULT_BROKER_SHARE = Fraction(1, 10)


def _short_digest(*parts: object) -> str:
    return hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).hexdigest()[:16]


# filters

FACT_FIELDS = ("recorded_at", "author_subject", "author_role", "fact_id")


@dataclass(frozen=True)
class FactPredicate:
    """Test on a fact field, e.g. ``FactPredicate("recorded_at", Op.GE, t0)``."""

    field: str
    operator: Op
    operand: object

    def __post_init__(self) -> None:
        if self.field not in FACT_FIELDS:
            raise ValueError(f"cannot filter on {self.field!r}")
        if self.operator in (Op.BEFORE, Op.AFTER) and self.field != "recorded_at":
            raise ValueError("before/after apply only to recorded_at")

    def holds(self, fact: Fact) -> bool:
        value = getattr(fact, self.field)
        if isinstance(value, RoleKind):
            value = value.value
        op, operand = self.operator, self.operand
        if op is Op.EQ:
            return value == operand
        if op is Op.NE:
            return value != operand
        if op is Op.IN:
            return value in operand
        if op in (Op.LT, Op.BEFORE):
            return value < operand
        if op is Op.LE:
            return value <= operand
        if op in (Op.GT, Op.AFTER):
            return value > operand
        return value >= operand


@dataclass(frozen=True)
class Filter:
    filter_id: str
    allowed_categories: frozenset[FactCategory]
    predicate: tuple[FactPredicate, ...] = ()

    def admits(self, fact: Fact) -> bool:
        return fact.category in self.allowed_categories and all(p.holds(fact) for p in self.predicate)


@dataclass(frozen=True)
class FilteredRecord:
    source_record_id: str
    source_version: int
    facts: frozenset[Fact]
    filter_id: str

    @property
    def categories(self) -> frozenset[FactCategory]:
        return frozenset(f.category for f in self.facts)

    @property
    def record_ids(self) -> frozenset[str]:
        return frozenset({self.source_record_id})


def apply_filter(record: Record | FilteredRecord, flt: Filter) -> FilteredRecord:
    """Project the current facts of ``record`` through ``flt``.

    Applying a filter to a FilteredRecord composes: the result stays tied to
    the original source record and version.
    """
    if isinstance(record, FilteredRecord):
        return FilteredRecord(
            record.source_record_id,
            record.source_version,
            frozenset(f for f in record.facts if flt.admits(f)),
            f"{record.filter_id}+{flt.filter_id}",
        )
    return FilteredRecord(
        record.record_id,
        record.version,
        frozenset(f for f in current_facts(record) if flt.admits(f)),
        flt.filter_id,
    )


# licenses and bundles

@dataclass(frozen=True)
class ProvenanceEntry:
    """``source_record_id`` is None for intermediaries (brokers) that own no record."""

    source_record_id: Optional[str]
    owner: str
    share: Fraction


@dataclass(frozen=True)
class License:
    license_id: str
    producer: str
    consumer: str
    policy: AnyPolicy
    issued_at: int
    provenance: tuple[ProvenanceEntry, ...]
    price: Optional[Decimal] = None

    def __post_init__(self) -> None:
        total = sum((p.share for p in self.provenance), Fraction(0))
        if abs(total - 1) > Fraction(1, 10**9):
            raise ValueError(f"provenance shares sum to {float(total)}, not 1")
        if any(not 0 <= p.share <= 1 for p in self.provenance):
            raise ValueError("provenance shares must lie in [0, 1]")
        if self.policy.issuer != self.producer:
            raise ValueError("the license policy must be issued by the producer")

    @property
    def record_ids(self) -> frozenset[str]:
        return frozenset(p.source_record_id for p in self.provenance if p.source_record_id is not None)


@dataclass(frozen=True)
class AggregateSet:
    elements: tuple[tuple[str, frozenset[Fact]], ...]
    constituent_licenses: tuple[License, ...]

    @property
    def categories(self) -> frozenset[FactCategory]:
        return frozenset(f.category for _, facts in self.elements for f in facts)

    @property
    def facts(self) -> frozenset[Fact]:
        return frozenset(f for _, facts in self.elements for f in facts)

    @property
    def record_ids(self) -> frozenset[str]:
        return frozenset(rid for rid, _ in self.elements)

    def composite_policy(self, issuer: str = "") -> CompositePolicy:
        parts = tuple(lic.policy for lic in self.constituent_licenses)
        pid = "cmp-" + _short_digest(*(p.policy_id for p in parts))
        return CompositePolicy(pid, issuer, parts)


Payload = Union[FilteredRecord, AggregateSet]


@dataclass(frozen=True)
class Bundle:
    """A payload and its license.

    ``effective`` holds the license policy after static resolution for the
    licensee: dynamic clauses verbatim plus the static grants that held at
    issue time. None means the license policy is evaluated as is.
    """

    bundle_id: str
    payload: Payload
    license: License
    created_at: int
    effective: Optional[tuple[Clause, ...]] = field(default=None)

    def __post_init__(self) -> None:
        if self.payload.record_ids != self.license.record_ids:
            raise ValueError("payload and license provenance disagree on source records")

    @property
    def categories(self) -> frozenset[FactCategory]:
        return self.payload.categories

    @property
    def facts(self) -> frozenset[Fact]:
        return self.payload.facts


def issue_bundle(
    fr: FilteredRecord,
    agreed_policy: UsagePolicy,
    producer: str,
    consumer: Subject,
    now: int,
    *,
    price: Decimal | None = None,
    log: AuditLog | None = None,
) -> Bundle:
    """Resolve the static part of ``agreed_policy`` against ``fr`` and wrap both.

    Raises StaticScopeMismatch when a static permit names a category the
    filtered record does not contain.
    """
    if agreed_policy.issuer != producer:
        raise ValueError("agreed policy must be issued by the producer")
    static, _ = classify_clauses(agreed_policy)
    present = fr.categories
    for clause in static:
        if clause.effect is Effect.PERMIT and clause.scope and not clause.scope <= present:
            missing = sorted(c.value for c in clause.scope - present)
            raise StaticScopeMismatch(
                f"policy grants {', '.join(missing)} which the filtered record does not contain"
            )
    for clause in agreed_policy.clauses:
        if clause.expires is not None and clause.expires <= now:
            raise ExpiredTerms("a clause expires before the bundle is issued")

    consumer_id = consumer.subject_id
    license_id = "lic-" + _short_digest(fr.source_record_id, fr.source_version, fr.filter_id,
                                        agreed_policy.policy_id, producer, consumer_id, now)
    lic = License(
        license_id=license_id,
        producer=producer,
        consumer=consumer_id,
        policy=agreed_policy,
        issued_at=now,
        provenance=(ProvenanceEntry(fr.source_record_id, producer, Fraction(1)),),
        price=price,
    )
    bundle = Bundle("bdl-" + license_id[4:], fr, lic, now, resolve_static(agreed_policy, consumer))
    if log is not None:
        log.append(timestamp=now, actor=producer, event_kind="bundle_issued",
                   detail=_issue_detail(bundle))
    return bundle


def _issue_detail(bundle: Bundle) -> dict:
    lic = bundle.license
    return {
        "bundle_id": bundle.bundle_id,
        "license_id": lic.license_id,
        "producer": lic.producer,
        "consumer": lic.consumer,
        "policy_id": lic.policy.policy_id,
        "record_ids": sorted(lic.record_ids),
        "price": None if lic.price is None else str(lic.price),
    }


def _decide(bundle: Bundle, action: Action, categories, ctx: Context, now: int) -> Decision:
    lic = bundle.license
    if ctx.subject.subject_id != lic.consumer:
        return Decision(Effect.DENY, None, reason=NOT_LICENSEE, policy_id=lic.policy.policy_id)
    if bundle.effective is not None:
        return evaluate_clauses(bundle.effective, lic.policy.policy_id, action, categories, ctx, now)
    return evaluate(lic.policy, action, categories, ctx, now)


def request_use(
    bundle: Bundle,
    action: Action,
    categories: Iterable[FactCategory],
    ctx: Context,
    now: int,
    *,
    log: AuditLog | None = None,
) -> Decision:
    """Adjudicate one use of a bundle locally, from the bundle alone."""
    action = Action(action)
    cats = frozenset(categories)
    decision = _decide(bundle, action, cats, ctx, now)
    if log is not None:
        log.append(
            timestamp=now,
            actor=ctx.subject.subject_id,
            event_kind="decision_rendered",
            detail={
                "bundle_id": bundle.bundle_id,
                "license_id": bundle.license.license_id,
                "action": action.value,
                "categories": sorted(c.value for c in cats),
                "role": ctx.role.value,
                "decision": decision.to_dict(),
            },
        )
    return decision


def metered_charges(entries, license_id: str) -> Decimal:
    """Sum of per-request prices owed under one license, read from the audit trail."""
    total = Decimal(0)
    for e in entries:
        if e.event_kind != "decision_rendered":
            continue
        detail = e.payload()
        if detail.get("license_id") != license_id:
            continue
        d = detail["decision"]
        if d["outcome"] == Effect.PERMIT.value and d["price"] is not None:
            total += Decimal(d["price"])
    return total


# aggregation

def _merge_elements(payloads: Iterable[Payload]) -> tuple[tuple[str, frozenset[Fact]], ...]:
    merged: dict[str, set[Fact]] = {}
    for payload in payloads:
        if isinstance(payload, FilteredRecord):
            merged.setdefault(payload.source_record_id, set()).update(payload.facts)
        else:
            for rid, facts in payload.elements:
                merged.setdefault(rid, set()).update(facts)
    return tuple((rid, frozenset(facts)) for rid, facts in merged.items())


def _conflicts(bundles: Sequence[Bundle], actions: Sequence[Action], ctx: Context,
               now: int) -> list[tuple[str, Decision]]:
    """Per-constituent decision: the first refused action, else the last permit."""
    out = []
    for b in bundles:
        decision = None
        for action in actions:
            decision = _decide(b, action, b.categories, ctx, now)
            if not decision.permitted:
                break
        assert decision is not None
        out.append((b.license.policy.policy_id, decision))
    return out


def aggregate(
    bundles: Sequence[Bundle],
    requested_action: Action,
    ctx: Context,
    now: int,
    *,
    log: AuditLog | None = None,
) -> AggregateSet:
    """Combine bundles if every license permits both aggregation and ``requested_action``."""
    if len(bundles) < 2:
        raise ValueError("aggregation needs at least two bundles")
    requested_action = Action(requested_action)
    actions = [Action.AGGREGATE]
    if requested_action is not Action.AGGREGATE:
        actions.append(requested_action)
    explanation = _conflicts(bundles, actions, ctx, now)
    refused = [pid for pid, d in explanation if not d.permitted]
    if log is not None:
        log.append(
            timestamp=now,
            actor=ctx.subject.subject_id,
            event_kind="decision_rendered",
            detail={
                "operation": "aggregate",
                "action": requested_action.value,
                "bundle_ids": [b.bundle_id for b in bundles],
                "role": ctx.role.value,
                "outcome": Effect.DENY.value if refused else Effect.PERMIT.value,
                "denied_by": refused,
            },
        )
    if refused:
        raise AggregationDenied(f"aggregation refused by {', '.join(refused)}", explanation)
    return AggregateSet(_merge_elements(b.payload for b in bundles),
                        tuple(b.license for b in bundles))


def aggregate_decision(agg: AggregateSet, action: Action, categories: Iterable[FactCategory],
                       ctx: Context, now: int) -> Decision:
    """Decision for a use of the whole aggregate: the conjunction of its licenses."""
    return evaluate(agg.composite_policy(), action, categories, ctx, now)


# compensation

def _license_weight(lic: License) -> Optional[Decimal]:
    if lic.price is not None:
        return lic.price
    policies = lic.policy.leaves() if isinstance(lic.policy, CompositePolicy) else [lic.policy]
    prices = [c.price for p in policies for c in p.clauses
              if c.effect is Effect.PERMIT and c.price is not None]
    return max(prices) if prices else None


def _owner_fractions(licenses: Sequence[License]) -> dict[tuple[Optional[str], str], Fraction]:
    """Each provenance entry's fraction of the whole, weighted by constituent price."""
    raw = [_license_weight(lic) for lic in licenses]
    if all(w is None for w in raw) or sum(w or 0 for w in raw) == 0:
        weights = [Fraction(1)] * len(licenses)
    else:
        weights = [Fraction(w) if w is not None else Fraction(0) for w in raw]
    total = sum(weights)
    out: dict[tuple[Optional[str], str], Fraction] = {}
    for lic, w in zip(licenses, weights):
        for entry in lic.provenance:
            key = (entry.source_record_id, entry.owner)
            out[key] = out.get(key, Fraction(0)) + w / total * entry.share
    return out


def split_cents(total_cents: int, fractions: Sequence[Fraction]) -> list[int]:
    """Largest-remainder apportionment; ties go to the earlier position."""
    exact = [f * total_cents for f in fractions]
    floors = [int(x.numerator // x.denominator) for x in exact]
    leftover = total_cents - sum(floors)
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - floors[i]), i))
    for i in order[:leftover]:
        floors[i] += 1
    return floors


def attribute_compensation(
    agg: AggregateSet,
    payment: Decimal | int | str,
    *,
    log: AuditLog | None = None,
    now: int = 0,
    actor: str = "",
) -> list[tuple[str, Decimal]]:
    """Split ``payment`` among record owners and brokers behind the aggregate.

    Constituents are weighted by their price (equal when none is priced) and
    each constituent's part is split by provenance share. Amounts are whole
    cents and always sum to ``payment``.
    """
    amount = Decimal(payment)
    if amount < 0:
        raise ValueError("payment must be non-negative")
    cents = amount / CENT
    if cents != cents.to_integral_value(rounding=ROUND_FLOOR):
        raise ValueError("payment must be a whole number of cents")
    per_entry = _owner_fractions(agg.constituent_licenses)
    owners: dict[str, Fraction] = {}
    for (_, owner), frac in per_entry.items():
        owners[owner] = owners.get(owner, Fraction(0)) + frac
    names = list(owners)
    split = split_cents(int(cents), [owners[n] for n in names])
    result = [(name, (Decimal(c) * CENT).quantize(CENT)) for name, c in zip(names, split)]
    if log is not None:
        log.append(
            timestamp=now,
            actor=actor,
            event_kind="compensation_attributed",
            detail={
                "payment": str(amount.quantize(CENT)),
                "licenses": [lic.license_id for lic in agg.constituent_licenses],
                "split": [[name, str(v)] for name, v in result],
            },
        )
    return result


# redistribution

def redistribute_bundle(
    agg: AggregateSet,
    new_consumer: str,
    ctx: Context,
    now: int,
    *,
    broker_share: Fraction = DEFAULT_BROKER_SHARE,
    log: AuditLog | None = None,
) -> Bundle:
    """Re-license an aggregate from a broker to ``new_consumer``.

    The new license is the conjunction of the constituent policies. Owners
    keep ``1 - broker_share`` of the provenance, the broker takes the rest.
    """
    broker = ctx.subject.subject_id
    policies = [lic.policy for lic in agg.constituent_licenses]
    if ctx.role is not RoleKind.BROKER:
        explanation = [(p.policy_id, Decision(Effect.DENY, None, reason="only brokers redistribute",
                                              policy_id=p.policy_id)) for p in policies]
        raise RedistributionDenied(f"{ctx.role.value} may not redistribute", explanation)
    explanation = []
    for lic in agg.constituent_licenses:
        cats = frozenset(f.category for rid, facts in agg.elements
                         if rid in lic.record_ids for f in facts)
        if lic.consumer != broker:
            d = Decision(Effect.DENY, None, reason=NOT_LICENSEE, policy_id=lic.policy.policy_id)
        else:
            d = evaluate(lic.policy, Action.REDISTRIBUTE, cats, ctx, now)
        explanation.append((lic.policy.policy_id, d))
    refused = [pid for pid, d in explanation if not d.permitted]
    if refused:
        if log is not None:
            log.append(
                timestamp=now,
                actor=broker,
                event_kind="decision_rendered",
                detail={
                    "operation": "redistribute",
                    "licenses": [lic.license_id for lic in agg.constituent_licenses],
                    "new_consumer": new_consumer,
                    "outcome": Effect.DENY.value,
                    "denied_by": refused,
                },
            )
        raise RedistributionDenied(f"redistribution refused by {', '.join(refused)}", explanation)

    share = Fraction(broker_share)
    if not 0 <= share <= 1:
        raise ValueError("broker_share must lie in [0, 1]")
    provenance = [
        ProvenanceEntry(rid, owner, frac * (1 - share))
        for (rid, owner), frac in _owner_fractions(agg.constituent_licenses).items()
    ]
    provenance.append(ProvenanceEntry(None, broker, share))
    merged: dict[tuple[Optional[str], str], Fraction] = {}
    for entry in provenance:
        key = (entry.source_record_id, entry.owner)
        merged[key] = merged.get(key, Fraction(0)) + entry.share
    composite = agg.composite_policy(issuer=broker)
    license_id = "lic-" + _short_digest(composite.policy_id, broker, new_consumer, now,
                                        *(lic.license_id for lic in agg.constituent_licenses))
    lic = License(
        license_id=license_id,
        producer=broker,
        consumer=new_consumer,
        policy=composite,
        issued_at=now,
        provenance=tuple(ProvenanceEntry(rid, owner, s) for (rid, owner), s in merged.items()),
    )
    bundle = Bundle("bdl-" + license_id[4:], agg, lic, now)
    if log is not None:
        log.append(timestamp=now, actor=broker, event_kind="bundle_issued",
                   detail=_issue_detail(bundle))
    return bundle
