"""Records, facts, subjects, roles and evaluation contexts.

Everything here is an immutable value. Editing operations return a new
``Record`` and, when handed an audit log, append exactly one entry to it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Any, Mapping, Optional

from .errors import (
    AlreadySuperseded,
    DuplicateFactId,
    NotOriginalAuthor,
    RoleNotAuthorized,
    UnknownFact,
)

if TYPE_CHECKING:
    from .audit import AuditLog


class FactCategory(str, Enum):
    VACCINATION = "vaccination"
    PSYCHIATRIC = "psychiatric"
    GENETIC = "genetic"
    PRESCRIPTION = "prescription"
    LAB_MARKER = "lab_marker"
    TREATMENT = "treatment"
    CONTACT_INFO = "contact_info"

    @property
    def is_medical(self) -> bool:
        return self is not FactCategory.CONTACT_INFO


class RoleKind(str, Enum):
    PATIENT = "patient"
    PHYSICIAN = "physician"
    ADMINISTRATOR = "administrator"
    RESEARCHER = "researcher"
    BROKER = "broker"
    EMPLOYER = "employer"

    @property
    def is_provider(self) -> bool:
        return self is RoleKind.PHYSICIAN


class DeviceType(str, Enum):
    CERTIFIED = "certified"
    MOBILE = "mobile"
    DESKTOP = "desktop"
    UNKNOWN = "unknown"


MEDICAL_CATEGORIES = frozenset(c for c in FactCategory if c.is_medical)


@dataclass(frozen=True)
class Fact:
    fact_id: str
    category: FactCategory
    author_subject: str
    author_role: RoleKind
    recorded_at: int
    body: str
    superseded_by: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.fact_id:
            raise ValueError("fact_id cannot be empty")
        object.__setattr__(self, "category", FactCategory(self.category))
        object.__setattr__(self, "author_role", RoleKind(self.author_role))

    def to_dict(self) -> dict:
        return {
            "fact_id": self.fact_id,
            "category": self.category.value,
            "author_subject": self.author_subject,
            "author_role": self.author_role.value,
            "recorded_at": self.recorded_at,
            "body": self.body,
            "superseded_by": self.superseded_by,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Fact":
        return cls(
            fact_id=data["fact_id"],
            category=FactCategory(data["category"]),
            author_subject=data["author_subject"],
            author_role=RoleKind(data["author_role"]),
            recorded_at=int(data["recorded_at"]),
            body=data["body"],
            superseded_by=data.get("superseded_by"),
        )


@dataclass(frozen=True)
class Record:
    """A personal health record: an append-only, ordered set of facts."""

    record_id: str
    owner: str
    facts: tuple[Fact, ...] = ()
    version: int = 0

    def fact(self, fact_id: str) -> Fact:
        for f in self.facts:
            if f.fact_id == fact_id:
                return f
        raise UnknownFact(fact_id)

    def has_fact(self, fact_id: str) -> bool:
        return any(f.fact_id == fact_id for f in self.facts)

    @property
    def categories(self) -> frozenset[FactCategory]:
        return frozenset(f.category for f in current_facts(self))

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "owner": self.owner,
            "version": self.version,
            "facts": [f.to_dict() for f in self.facts],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Record":
        return cls(
            record_id=data["record_id"],
            owner=data["owner"],
            facts=tuple(Fact.from_dict(f) for f in data["facts"]),
            version=int(data["version"]),
        )


@dataclass(frozen=True)
class Subject:
    subject_id: str
    display_name: str = ""
    parameters: dict = field(default_factory=dict, hash=False)
    verified_roles: frozenset[RoleKind] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "verified_roles", frozenset(RoleKind(r) for r in self.verified_roles)
        )

    def may_act_as(self, role: RoleKind) -> bool:
        return role is RoleKind.PATIENT or role in self.verified_roles

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "display_name": self.display_name,
            "parameters": dict(self.parameters),
            "verified_roles": sorted(r.value for r in self.verified_roles),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Subject":
        return cls(
            subject_id=data["subject_id"],
            display_name=data.get("display_name", ""),
            parameters=dict(data.get("parameters", {})),
            verified_roles=frozenset(RoleKind(r) for r in data.get("verified_roles", ())),
        )


ENVIRONMENT_KEYS = ("Date", "Location", "DeviceType")


@dataclass(frozen=True)
class Environment:
    """Request-time parameters. ``Date``, ``Location`` and ``DeviceType`` are mandatory."""

    parameters: dict = field(hash=False)

    def __post_init__(self) -> None:
        missing = [k for k in ENVIRONMENT_KEYS if k not in self.parameters]
        if missing:
            raise ValueError(f"environment lacks {', '.join(missing)}")
        params = dict(self.parameters)
        params["Date"] = int(params["Date"])
        params["DeviceType"] = DeviceType(params["DeviceType"])
        object.__setattr__(self, "parameters", params)

    @classmethod
    def of(cls, date: int, location: str, device: DeviceType | str, **extra: Any) -> "Environment":
        return cls({"Date": date, "Location": location, "DeviceType": device, **extra})

    @property
    def date(self) -> int:
        return self.parameters["Date"]

    @property
    def location(self) -> str:
        return self.parameters["Location"]

    @property
    def device(self) -> DeviceType:
        return self.parameters["DeviceType"]

    def to_dict(self) -> dict:
        out = dict(self.parameters)
        out["DeviceType"] = self.device.value
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Environment":
        return cls(dict(data))


@dataclass(frozen=True)
class Context:
    subject: Subject
    role: RoleKind
    environment: Environment

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", RoleKind(self.role))
        if not self.subject.may_act_as(self.role):
            raise RoleNotAuthorized(
                f"{self.subject.subject_id} is not verified as {self.role.value}"
            )

    def to_dict(self) -> dict:
        return {
            "subject": self.subject.to_dict(),
            "role": self.role.value,
            "environment": self.environment.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Context":
        return cls(
            subject=Subject.from_dict(data["subject"]),
            role=RoleKind(data["role"]),
            environment=Environment.from_dict(data["environment"]),
        )


def append_fact(record: Record, fact: Fact, ctx: Context, *, log: AuditLog | None = None) -> Record:
    """Add a new fact. Medical facts need a provider; contact info needs the owner or a provider."""
    if fact.author_role is not ctx.role or fact.author_subject != ctx.subject.subject_id:
        raise RoleNotAuthorized("fact authorship must match the acting context")
    if fact.category.is_medical:
        if not ctx.role.is_provider:
            raise RoleNotAuthorized(
                f"{ctx.role.value} may not add {fact.category.value} facts"
            )
    elif not (ctx.role.is_provider or ctx.subject.subject_id == record.owner):
        raise RoleNotAuthorized("only the owner or a provider may add contact information")
    if record.has_fact(fact.fact_id):
        raise DuplicateFactId(fact.fact_id)
    if fact.superseded_by is not None:
        raise ValueError("a new fact cannot already be superseded")
    updated = replace(record, facts=record.facts + (fact,), version=record.version + 1)
    if log is not None:
        log.append(
            timestamp=fact.recorded_at,
            actor=ctx.subject.subject_id,
            event_kind="fact_appended",
            detail={
                "record_id": record.record_id,
                "version": updated.version,
                "role": ctx.role.value,
                "fact": _fact_summary(fact),
            },
        )
    return updated


def _fact_summary(fact: Fact) -> dict:
    # the audit store never holds fact bodies, only a digest of them
    d = fact.to_dict()
    d["body_sha256"] = hashlib.sha256(d.pop("body").encode("utf-8")).hexdigest()
    return d


def supersede_fact(
    record: Record,
    old_id: str,
    new_fact: Fact,
    ctx: Context,
    *,
    log: AuditLog | None = None,
) -> Record:
    """Correct a fact by appending ``new_fact`` and linking the old one to it.

    Medical facts can only be corrected by the provider who wrote them;
    contact information only by the record owner.
    """
    old = record.fact(old_id)
    if old.superseded_by is not None:
        raise AlreadySuperseded(old_id)
    if new_fact.category is not old.category:
        raise ValueError("a correction must keep the category of the fact it replaces")
    if new_fact.author_role is not ctx.role or new_fact.author_subject != ctx.subject.subject_id:
        raise RoleNotAuthorized("fact authorship must match the acting context")
    if old.category.is_medical:
        if not ctx.role.is_provider:
            raise RoleNotAuthorized(f"{ctx.role.value} may not edit {old.category.value} facts")
        if ctx.subject.subject_id != old.author_subject:
            raise NotOriginalAuthor(
                f"{ctx.subject.subject_id} did not author {old_id}"
            )
    elif ctx.subject.subject_id != record.owner:
        raise NotOriginalAuthor("only the record owner may edit contact information")
    if record.has_fact(new_fact.fact_id):
        raise DuplicateFactId(new_fact.fact_id)
    if new_fact.superseded_by is not None:
        raise ValueError("a new fact cannot already be superseded")

    facts = tuple(
        replace(f, superseded_by=new_fact.fact_id) if f.fact_id == old_id else f
        for f in record.facts
    ) + (new_fact,)
    updated = replace(record, facts=facts, version=record.version + 1)
    if log is not None:
        log.append(
            timestamp=new_fact.recorded_at,
            actor=ctx.subject.subject_id,
            event_kind="fact_superseded",
            detail={
                "record_id": record.record_id,
                "version": updated.version,
                "role": ctx.role.value,
                "superseded": old_id,
                "fact": _fact_summary(new_fact),
            },
        )
    return updated


def current_facts(record: Record) -> frozenset[Fact]:
    return frozenset(f for f in record.facts if f.superseded_by is None)


def supersession_chain(record: Record, fact_id: str) -> list[Fact]:
    """Follow ``superseded_by`` links from ``fact_id`` to the current version."""
    chain = [record.fact(fact_id)]
    seen = {fact_id}
    while chain[-1].superseded_by is not None:
        nxt = chain[-1].superseded_by
        if nxt in seen:
            raise ValueError(f"supersession cycle at {nxt}")
        seen.add(nxt)
        chain.append(record.fact(nxt))
    return chain
