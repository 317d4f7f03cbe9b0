"""Deny-overrides decision procedure and static/dynamic clause partitioning."""

from __future__ import annotations

from dataclasses import replace
from decimal import Decimal, InvalidOperation
from typing import Any, Iterable, Sequence

from ..model import Context, DeviceType, Environment, FactCategory, RoleKind, Subject
from .ast import (
    Action,
    AnyPolicy,
    Clause,
    CompositePolicy,
    Decision,
    Effect,
    Obligations,
    Op,
    Predicate,
    UsagePolicy,
)
from .parser import render_clause

DEFAULT_DENY = "default deny"


def _lookup(name: str, ctx: Context) -> Any:
    env = ctx.environment
    if name == "Date":
        return env.date
    if name == "Location":
        return env.location
    if name == "DeviceType":
        return env.device.value
    return ctx.subject.parameters.get(name)


def _as_number(value: Any) -> Decimal | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float, Decimal)):
        return Decimal(value)
    if isinstance(value, str):
        try:
            return Decimal(value)
        except InvalidOperation:
            return None
    return None


def _equal(actual: Any, operand: Any) -> bool:
    if isinstance(operand, Decimal):
        num = _as_number(actual)
        return num is not None and num == operand
    if isinstance(operand, int):
        return actual == operand
    return str(actual) == operand


def predicate_holds(pred: Predicate, ctx: Context) -> bool:
    """A predicate over a parameter the context does not carry is false."""
    actual = _lookup(pred.parameter, ctx)
    if actual is None:
        return False
    op, operand = pred.operator, pred.operand
    if op is Op.EQ:
        return _equal(actual, operand)
    if op is Op.NE:
        return not _equal(actual, operand)
    if op is Op.IN:
        return any(_equal(actual, item) for item in operand)
    if pred.parameter == "Date":
        left, right = actual, operand
    else:
        left, right = _as_number(actual), operand
        if left is None:
            return False
    if op in (Op.LT, Op.BEFORE):
        return left < right
    if op is Op.LE:
        return left <= right
    if op in (Op.GT, Op.AFTER):
        return left > right
    if op is Op.GE:
        return left >= right
    raise AssertionError(op)


def clause_applies(clause: Clause, action: Action, ctx: Context, now: int) -> bool:
    """Action, role, expiry and conditions; category reach is checked separately."""
    if clause.action is not action or clause.role is not ctx.role:
        return False
    if clause.expires is not None and now >= clause.expires:
        return False
    return all(predicate_holds(p, ctx) for p in clause.conditions)


def evaluate(
    policy: AnyPolicy,
    action: Action,
    categories: Iterable[FactCategory],
    ctx: Context,
    now: int,
) -> Decision:
    """Deny-overrides with default deny.

    A deny clause fires when any requested category is in its scope; a permit
    clause must cover all requested categories. The first matching permit
    (in clause order) supplies the obligations.
    """
    if isinstance(policy, CompositePolicy):
        return _evaluate_composite(policy, action, categories, ctx, now)
    action = Action(action)
    cats = frozenset(categories)
    permit_at = None
    for i, clause in enumerate(policy.clauses):
        if not clause_applies(clause, action, ctx, now):
            continue
        if clause.effect is Effect.DENY:
            if clause.touches(cats):
                return Decision(Effect.DENY, i, reason=f"denied by clause {i}: {render_clause(clause)}",
                                policy_id=policy.policy_id)
        elif permit_at is None and clause.covers(cats):
            permit_at = i
    if permit_at is None:
        return Decision(Effect.DENY, None, reason=DEFAULT_DENY, policy_id=policy.policy_id)
    clause = policy.clauses[permit_at]
    return Decision(
        Effect.PERMIT,
        permit_at,
        Obligations(clause.requires_attribution, clause.price),
        reason=f"permitted by clause {permit_at}",
        policy_id=policy.policy_id,
    )


def _evaluate_composite(policy: CompositePolicy, action, categories, ctx, now) -> Decision:
    cats = frozenset(categories)
    obligations = Obligations()
    first = None
    for part in policy.parts:
        d = evaluate(part, action, cats, ctx, now)
        if not d.permitted:
            return replace(d, reason=f"{d.policy_id}: {d.reason}")
        obligations = obligations.merge(d.obligations)
        if first is None:
            first = d
    assert first is not None
    return Decision(Effect.PERMIT, first.matched_clause, obligations,
                    reason="permitted by every constituent", policy_id=policy.policy_id)


def classify_clauses(policy: UsagePolicy) -> tuple[list[Clause], list[Clause]]:
    """Split into (static, dynamic). Dynamic clauses read the environment or expire."""
    static, dynamic = [], []
    for clause in policy.clauses:
        (dynamic if clause.is_dynamic else static).append(clause)
    return static, dynamic


def resolve_static(policy: UsagePolicy, consumer: Subject) -> tuple[Clause, ...]:
    """Settle static clauses for one consumer, keeping dynamic clauses as they are.

    A static clause can only test subject parameters, which are fixed for the
    consumer, so it either becomes unconditional or drops out. The result may
    be empty, which evaluates to default deny.
    """
    probe = Context(consumer, RoleKind.PATIENT, Environment.of(0, "", DeviceType.UNKNOWN))
    kept = []
    for clause in policy.clauses:
        if clause.is_dynamic:
            kept.append(clause)
        elif all(predicate_holds(p, probe) for p in clause.conditions):
            kept.append(replace(clause, conditions=()))
    return tuple(kept)


def evaluate_clauses(
    clauses: Sequence[Clause],
    policy_id: str,
    action: Action,
    categories: Iterable[FactCategory],
    ctx: Context,
    now: int,
) -> Decision:
    if not clauses:
        return Decision(Effect.DENY, None, reason=DEFAULT_DENY, policy_id=policy_id)
    return evaluate(UsagePolicy(policy_id, "", tuple(clauses)), action, categories, ctx, now)


def explain_conflict(
    policies: Sequence[AnyPolicy],
    action: Action,
    categories: Iterable[FactCategory],
    ctx: Context,
    now: int,
) -> list[tuple[str, Decision]]:
    """Per-policy decisions; the denying entries are the cause of a conflict."""
    if not policies:
        raise ValueError("explain_conflict needs at least one policy")
    cats = frozenset(categories)
    return [(p.policy_id, evaluate(p, action, cats, ctx, now)) for p in policies]


def denying(explanation: Sequence[tuple[str, Decision]]) -> list[str]:
    return [pid for pid, d in explanation if not d.permitted]
