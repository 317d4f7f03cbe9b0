"""Policy syntax tree: predicates, clauses, policies, decisions."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from typing import Optional, Union

from ..model import FactCategory, RoleKind


class Effect(str, Enum):
    PERMIT = "permit"
    DENY = "deny"


class Action(str, Enum):
    READ = "read"
    APPEND = "append"
    SUPERSEDE = "supersede"
    AGGREGATE = "aggregate"
    REDISTRIBUTE = "redistribute"


class Op(str, Enum):
    EQ = "="
    NE = "!="
    LT = "<"
    LE = "<="
    GT = ">"
    GE = ">="
    IN = "in"
    BEFORE = "before"
    AFTER = "after"


ORDERING_OPS = frozenset({Op.LT, Op.LE, Op.GT, Op.GE})
TEMPORAL_OPS = frozenset({Op.BEFORE, Op.AFTER})

# Parameters that change from one request to the next.
ENVIRONMENT_PARAMS = frozenset({"Date", "Location", "DeviceType"})

Scalar = Union[int, Decimal, str]
Operand = Union[Scalar, frozenset]


@dataclass(frozen=True)
class Predicate:
    """``parameter operator operand``. Date operands are UTC seconds."""

    parameter: str
    operator: Op
    operand: Operand

    @property
    def is_dynamic(self) -> bool:
        return self.parameter in ENVIRONMENT_PARAMS


@dataclass(frozen=True)
class Clause:
    effect: Effect
    action: Action
    role: RoleKind
    scope: frozenset[FactCategory] = frozenset()
    conditions: tuple[Predicate, ...] = ()
    expires: Optional[int] = None
    price: Optional[Decimal] = None
    requires_attribution: bool = False

    def __post_init__(self) -> None:
        if self.price is not None and self.price < 0:
            raise ValueError("price must be non-negative")

    @property
    def is_dynamic(self) -> bool:
        return self.expires is not None or any(p.is_dynamic for p in self.conditions)

    def covers(self, categories: frozenset[FactCategory]) -> bool:
        """Permit reach: every requested category lies in scope."""
        return not self.scope or categories <= self.scope

    def touches(self, categories: frozenset[FactCategory]) -> bool:
        """Deny reach: any requested category lies in scope."""
        return not self.scope or bool(self.scope & categories)


@dataclass(frozen=True)
class UsagePolicy:
    policy_id: str
    issuer: str
    clauses: tuple[Clause, ...]

    def __post_init__(self) -> None:
        if not self.clauses:
            raise ValueError("a policy needs at least one clause")


@dataclass(frozen=True)
class CompositePolicy:
    """Conjunction: an action is permitted only if every part permits it."""

    policy_id: str
    issuer: str
    parts: tuple[Union[UsagePolicy, "CompositePolicy"], ...]

    def __post_init__(self) -> None:
        if not self.parts:
            raise ValueError("a composite policy needs at least one part")

    def leaves(self) -> list[UsagePolicy]:
        out: list[UsagePolicy] = []
        for p in self.parts:
            out.extend(p.leaves() if isinstance(p, CompositePolicy) else [p])
        return out


AnyPolicy = Union[UsagePolicy, CompositePolicy]


@dataclass(frozen=True)
class Obligations:
    attribution: bool = False
    price: Optional[Decimal] = None

    def merge(self, other: "Obligations") -> "Obligations":
        if self.price is None:
            price = other.price
        elif other.price is None:
            price = self.price
        else:
            price = self.price + other.price
        return Obligations(self.attribution or other.attribution, price)


NO_OBLIGATIONS = Obligations()


@dataclass(frozen=True)
class Decision:
    outcome: Effect
    matched_clause: Optional[int] = None
    obligations: Obligations = field(default=NO_OBLIGATIONS)
    reason: str = ""
    policy_id: str = ""

    @property
    def permitted(self) -> bool:
        return self.outcome is Effect.PERMIT

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome.value,
            "matched_clause": self.matched_clause,
            "attribution": self.obligations.attribution,
            "price": None if self.obligations.price is None else str(self.obligations.price),
            "reason": self.reason,
            "policy_id": self.policy_id,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Decision":
        price = data.get("price")
        return cls(
            outcome=Effect(data["outcome"]),
            matched_clause=data.get("matched_clause"),
            obligations=Obligations(bool(data.get("attribution")),
                                    None if price is None else Decimal(price)),
            reason=data.get("reason", ""),
            policy_id=data.get("policy_id", ""),
        )
