"""Canonical text form of bundles, with a detached SHA-256 digest.

Layout: a magic line, then ``[payload]`` (one tab-separated fact per line),
``[license]`` (header fields followed by policy text) and ``[provenance]``
(record id, owner, share). Aggregate payloads nest their constituent
licenses inside the payload section. Counts precede every variable-length
block so the format parses without lookahead.
"""

from __future__ import annotations

import hashlib
from decimal import Decimal
from fractions import Fraction

from .artifact import AggregateSet, Bundle, FilteredRecord, License, ProvenanceEntry
from .model import Fact, FactCategory, RoleKind
from .policy import AnyPolicy, Clause, CompositePolicy, UsagePolicy, parse_clauses, render_clause

MAGIC = "UMGR-BUNDLE v1"
NONE = "-"

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}


def esc(text: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in text)


def unesc(text: str) -> str:
    out, i = [], 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            out.append(_UNESCAPES.get(text[i + 1], text[i + 1]))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _opt(value) -> str:
    return NONE if value is None else esc(str(value))


def _fact_line(record_id: str, f: Fact) -> str:
    return "\t".join([
        "fact", esc(record_id), esc(f.fact_id), f.category.value, esc(f.author_subject),
        f.author_role.value, str(f.recorded_at), _opt(f.superseded_by), esc(f.body),
    ])


def _facts(record_id: str, facts) -> list[str]:
    return [_fact_line(record_id, f) for f in sorted(facts, key=lambda f: f.fact_id)]


def _policy_lines(policy: AnyPolicy) -> list[str]:
    if isinstance(policy, CompositePolicy):
        out = [f"composite\t{esc(policy.policy_id)}\t{esc(policy.issuer)}\t{len(policy.parts)}"]
        for part in policy.parts:
            out.extend(_policy_lines(part))
        return out
    out = [f"policy\t{esc(policy.policy_id)}\t{esc(policy.issuer)}\t{len(policy.clauses)}"]
    out.extend(render_clause(c) for c in policy.clauses)
    return out


def _license_lines(lic: License, with_provenance: bool = True) -> list[str]:
    out = ["\t".join(["license", esc(lic.license_id), esc(lic.producer), esc(lic.consumer),
                      str(lic.issued_at), _opt(lic.price)])]
    out.extend(_policy_lines(lic.policy))
    if with_provenance:
        out.append(f"provenance\t{len(lic.provenance)}")
        out.extend(_provenance_line(p) for p in lic.provenance)
    return out


def _provenance_line(p: ProvenanceEntry) -> str:
    share = Fraction(p.share)
    return f"{_opt(p.source_record_id)}\t{esc(p.owner)}\t{share.numerator}/{share.denominator}"


def serialize_bundle(bundle: Bundle) -> str:
    lines = [MAGIC, f"bundle\t{esc(bundle.bundle_id)}\t{bundle.created_at}", "[payload]"]
    payload = bundle.payload
    if isinstance(payload, FilteredRecord):
        lines.append("\t".join(["filtered", esc(payload.source_record_id),
                                str(payload.source_version), esc(payload.filter_id),
                                str(len(payload.facts))]))
        lines.extend(_facts(payload.source_record_id, payload.facts))
    else:
        lines.append(f"aggregate\t{len(payload.elements)}\t{len(payload.constituent_licenses)}")
        for rid, facts in payload.elements:
            lines.append(f"element\t{esc(rid)}\t{len(facts)}")
            lines.extend(_facts(rid, facts))
        for lic in payload.constituent_licenses:
            lines.extend(_license_lines(lic))
    lines.append("[license]")
    lines.extend(_license_lines(bundle.license, with_provenance=False))
    if bundle.effective is None:
        lines.append("effective\t-")
    else:
        lines.append(f"effective\t{len(bundle.effective)}")
        lines.extend(render_clause(c) for c in bundle.effective)
    lines.append("[provenance]")
    lines.extend(_provenance_line(p) for p in bundle.license.provenance)
    return "".join(ln + "\n" for ln in lines)


def bundle_digest(bundle_or_text: Bundle | str) -> str:
    text = bundle_or_text if isinstance(bundle_or_text, str) else serialize_bundle(bundle_or_text)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class _Reader:
    def __init__(self, text: str):
        if not text.endswith("\n"):
            raise ValueError("bundle text must end with a newline")
        self.lines = text[:-1].split("\n")
        self.i = 0

    def line(self) -> str:
        if self.i >= len(self.lines):
            raise ValueError("truncated bundle")
        ln = self.lines[self.i]
        self.i += 1
        return ln

    def fields(self, tag: str, n: int) -> list[str]:
        parts = self.line().split("\t")
        if parts[0] != tag or len(parts) != n + 1:
            raise ValueError(f"line {self.i}: expected '{tag}' with {n} fields")
        return parts[1:]

    def literal(self, expected: str) -> None:
        if self.line() != expected:
            raise ValueError(f"line {self.i}: expected {expected!r}")

    def clauses(self, n: int) -> tuple[Clause, ...]:
        return parse_clauses("\n".join(self.line() for _ in range(n)))


def _read_fact(r: _Reader) -> tuple[str, Fact]:
    rid, fid, cat, author, role, ts, sup, body = r.fields("fact", 8)
    fact = Fact(unesc(fid), FactCategory(cat), unesc(author), RoleKind(role), int(ts), unesc(body),
                None if sup == NONE else unesc(sup))
    return unesc(rid), fact


def _read_policy(r: _Reader) -> AnyPolicy:
    parts = r.line().split("\t")
    if len(parts) != 4 or parts[0] not in ("policy", "composite"):
        raise ValueError(f"line {r.i}: expected a policy block")
    tag, pid, issuer, count = parts
    n = int(count)
    if tag == "composite":
        return CompositePolicy(unesc(pid), unesc(issuer), tuple(_read_policy(r) for _ in range(n)))
    return UsagePolicy(unesc(pid), unesc(issuer), r.clauses(n))


def _read_provenance_line(line: str) -> ProvenanceEntry:
    rid, owner, share = line.split("\t")
    num, den = share.split("/")
    return ProvenanceEntry(None if rid == NONE else unesc(rid), unesc(owner),
                           Fraction(int(num), int(den)))


def _read_license(r: _Reader) -> License:
    lid, producer, consumer, issued, price = r.fields("license", 5)
    policy = _read_policy(r)
    (count,) = r.fields("provenance", 1)
    provenance = tuple(_read_provenance_line(r.line()) for _ in range(int(count)))
    return License(unesc(lid), unesc(producer), unesc(consumer), policy, int(issued),
                   provenance, None if price == NONE else Decimal(price))


def parse_bundle(text: str, digest: str | None = None) -> Bundle:
    """Rebuild a bundle; with ``digest`` the text is checked against it first."""
    if digest is not None and bundle_digest(text) != digest:
        raise ValueError("bundle digest mismatch")
    r = _Reader(text)
    r.literal(MAGIC)
    bundle_id, created = r.fields("bundle", 2)
    r.literal("[payload]")
    head = r.line().split("\t")
    payload: FilteredRecord | AggregateSet
    if head[0] == "filtered" and len(head) == 5:
        _, rid, version, fid, count = head
        facts = frozenset(_read_fact(r)[1] for _ in range(int(count)))
        payload = FilteredRecord(unesc(rid), int(version), facts, unesc(fid))
    elif head[0] == "aggregate" and len(head) == 3:
        elements = []
        for _ in range(int(head[1])):
            rid, count = r.fields("element", 2)
            elements.append((unesc(rid), frozenset(_read_fact(r)[1] for _ in range(int(count)))))
        licenses = tuple(_read_license(r) for _ in range(int(head[2])))
        payload = AggregateSet(tuple(elements), licenses)
    else:
        raise ValueError(f"line {r.i}: unknown payload header")
    r.literal("[license]")
    # provenance lives in its own section, after the effective clauses
    lid, producer, consumer, issued, price = r.fields("license", 5)
    policy = _read_policy(r)
    (eff,) = r.fields("effective", 1)
    effective = None if eff == NONE else r.clauses(int(eff))
    r.literal("[provenance]")
    provenance = tuple(_read_provenance_line(ln) for ln in r.lines[r.i:])
    lic = License(unesc(lid), unesc(producer), unesc(consumer), policy, int(issued), provenance,
                  None if price == NONE else Decimal(price))
    return Bundle(unesc(bundle_id), payload, lic, int(created), effective)
