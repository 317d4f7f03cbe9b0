"""Line-oriented policy language: tokenizer, parser and canonical renderer.

One clause per line::

    permit read to researcher scope lab_marker when Location = clinic expires 2030-01-01 price 5 attribution
    deny aggregate to researcher scope genetic, psychiatric

Lines starting with ``#`` are comments. Predicates use ``= != < <= > >= in
before after``; ``in`` takes a set literal ``{a, b}``. Dates are RFC 3339.
"""

from __future__ import annotations

import hashlib
import re
from decimal import Decimal, InvalidOperation
from typing import Iterator, NamedTuple, Optional

from .. import timestamps
from ..errors import PolicySyntaxError, PolicyTypeError
from ..model import DeviceType, FactCategory, RoleKind
from .ast import (
    ORDERING_OPS,
    TEMPORAL_OPS,
    Action,
    Clause,
    Effect,
    Op,
    Predicate,
    UsagePolicy,
)


class Token(NamedTuple):
    kind: str  # word, string, op, lbrace, rbrace, comma
    text: str
    column: int


_TOKEN = re.compile(
    r'\s*(?:(?P<string>"(?:[^"\\]|\\.)*")'
    r"|(?P<op>!=|<=|>=|=|<|>)"
    r"|(?P<lbrace>\{)|(?P<rbrace>\})|(?P<comma>,)"
    r'|(?P<word>[^\s,{}=<>!"]+))'
)
_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_NUMBER = re.compile(r"^-?\d+(\.\d+)?$")
_BARE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")

KEYWORDS = frozenset({"permit", "deny", "to", "scope", "when", "and", "expires", "price",
                      "attribution", "in", "before", "after"})


def _tokenize(line: str, lineno: int) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(line):
        if line[pos:].strip() == "":
            break
        m = _TOKEN.match(line, pos)
        if not m or m.end() == pos:
            col = pos + len(line[pos:]) - len(line[pos:].lstrip()) + 1
            raise PolicySyntaxError(f"unexpected character {line[col - 1]!r}", lineno, col)
        kind = m.lastgroup
        assert kind is not None
        tokens.append(Token(kind, m.group(kind), m.start(kind) + 1))
        pos = m.end()
    return tokens


class _LineParser:
    def __init__(self, line: str, lineno: int):
        self.lineno = lineno
        self.tokens = _tokenize(line, lineno)
        self.i = 0
        self.end_col = len(line.rstrip()) + 1

    def peek(self) -> Optional[Token]:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def col(self) -> int:
        tok = self.peek()
        return tok.column if tok else self.end_col

    def error(self, message: str, column: int | None = None) -> PolicySyntaxError:
        return PolicySyntaxError(message, self.lineno, self.col() if column is None else column)

    def next(self, what: str) -> Token:
        tok = self.peek()
        if tok is None:
            raise self.error(f"expected {what}, found end of line")
        self.i += 1
        return tok

    def at_word(self, word: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.kind == "word" and tok.text == word

    def expect_word(self, word: str) -> Token:
        tok = self.next(f"'{word}'")
        if tok.kind != "word" or tok.text != word:
            raise self.error(f"expected '{word}', found {tok.text!r}", tok.column)
        return tok

    def enum_word(self, enum, what: str):
        tok = self.next(what)
        try:
            return enum(tok.text)
        except ValueError:
            raise self.error(f"unknown {what} {tok.text!r}", tok.column) from None

    def clause(self) -> Clause:
        effect = self.enum_word(Effect, "effect")
        action = self.enum_word(Action, "action")
        self.expect_word("to")
        role = self.enum_word(RoleKind, "role")

        scope: set[FactCategory] = set()
        if self.at_word("scope"):
            self.i += 1
            scope.add(self.enum_word(FactCategory, "category"))
            while self.peek() is not None and self.peek().kind == "comma":
                self.i += 1
                scope.add(self.enum_word(FactCategory, "category"))

        conditions: list[Predicate] = []
        if self.at_word("when"):
            self.i += 1
            conditions.append(self.predicate())
            while self.at_word("and"):
                self.i += 1
                conditions.append(self.predicate())

        expires = None
        if self.at_word("expires"):
            self.i += 1
            tok = self.next("timestamp")
            try:
                expires = timestamps.parse(_unquote(tok))
            except ValueError:
                raise self.error(f"bad timestamp {tok.text!r}", tok.column) from None

        price = None
        if self.at_word("price"):
            kw = self.next("price")
            tok = self.next("amount")
            if not _NUMBER.match(tok.text):
                raise self.error(f"bad amount {tok.text!r}", tok.column)
            price = Decimal(tok.text)
            if price < 0:
                raise self.error("price must be non-negative", tok.column)
            if effect is Effect.DENY:
                raise self.error("price is only allowed on permit clauses", kw.column)

        attribution = False
        if self.at_word("attribution"):
            kw = self.next("attribution")
            if effect is Effect.DENY:
                raise self.error("attribution is only allowed on permit clauses", kw.column)
            attribution = True

        tok = self.peek()
        if tok is not None:
            raise self.error(f"unexpected {tok.text!r}")
        return Clause(effect, action, role, frozenset(scope), tuple(conditions),
                      expires, price, attribution)

    def predicate(self) -> Predicate:
        name_tok = self.next("parameter name")
        if name_tok.kind != "word" or not _IDENT.match(name_tok.text) or name_tok.text in KEYWORDS:
            raise self.error(f"expected parameter name, found {name_tok.text!r}", name_tok.column)
        name = name_tok.text
        op_tok = self.next("operator")
        if op_tok.kind == "op" or (op_tok.kind == "word" and op_tok.text in ("in", "before", "after")):
            op = Op(op_tok.text)
        else:
            raise self.error(f"expected operator, found {op_tok.text!r}", op_tok.column)

        if op is Op.IN:
            lb = self.next("'{'")
            if lb.kind != "lbrace":
                raise self.error("'in' takes a set literal such as {a, b}", lb.column)
            items = [self.literal_token()]
            while self.peek() is not None and self.peek().kind == "comma":
                self.i += 1
                items.append(self.literal_token())
            rb = self.next("'}'")
            if rb.kind != "rbrace":
                raise self.error(f"expected '}}', found {rb.text!r}", rb.column)
            operand = frozenset(_typed_literal(name, op, t, self.lineno) for t in items)
        else:
            tok = self.literal_token()
            operand = _typed_literal(name, op, tok, self.lineno)
        _check_operator(name, op, operand, name_tok, op_tok, self.lineno)
        return Predicate(name, op, operand)

    def literal_token(self) -> Token:
        tok = self.next("literal")
        if tok.kind not in ("word", "string"):
            raise self.error(f"expected literal, found {tok.text!r}", tok.column)
        return tok


def _unquote(tok: Token) -> str:
    if tok.kind == "string":
        return re.sub(r"\\(.)", r"\1", tok.text[1:-1])
    return tok.text


def _typed_literal(name: str, op: Op, tok: Token, lineno: int):
    text = _unquote(tok)
    if name == "Date":
        try:
            return timestamps.parse(text)
        except ValueError:
            raise PolicyTypeError(f"Date compares against timestamps, not {text!r}",
                                  lineno, tok.column) from None
    if name == "DeviceType":
        try:
            return DeviceType(text).value
        except ValueError:
            raise PolicyTypeError(f"unknown device type {text!r}", lineno, tok.column) from None
    if name == "Location" or tok.kind == "string":
        return text
    if _NUMBER.match(text):
        try:
            return Decimal(text)
        except InvalidOperation:  # pragma: no cover - regex guards this
            pass
    return text


def _check_operator(name, op, operand, name_tok, op_tok, lineno) -> None:
    if op in TEMPORAL_OPS and name != "Date":
        raise PolicyTypeError(f"'{op.value}' applies only to Date, not {name}", lineno, op_tok.column)
    if op in ORDERING_OPS:
        if name in ("Location", "DeviceType"):
            raise PolicyTypeError(f"'{op.value}' is not defined for {name}", lineno, op_tok.column)
        if name != "Date" and not isinstance(operand, Decimal):
            raise PolicyTypeError(f"'{op.value}' needs a numeric operand for {name}",
                                  lineno, op_tok.column)


def _iter_clause_lines(source: str) -> Iterator[tuple[int, str]]:
    for lineno, line in enumerate(source.splitlines(), start=1):
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            yield lineno, line


def parse_clauses(source: str) -> tuple[Clause, ...]:
    return tuple(_LineParser(line, n).clause() for n, line in _iter_clause_lines(source))


def parse_policy(source: str, *, policy_id: str | None = None, issuer: str = "") -> UsagePolicy:
    """Parse policy text. Without ``policy_id`` one is derived from the canonical text."""
    clauses = parse_clauses(source)
    if not clauses:
        lines = source.splitlines()
        raise PolicySyntaxError("policy has no clauses", max(len(lines), 1), 1)
    if policy_id is None:
        canonical = "\n".join(render_clause(c) for c in clauses)
        policy_id = "pol-" + hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
    return UsagePolicy(policy_id, issuer, clauses)


# rendering

def _render_scalar(value) -> str:
    if isinstance(value, Decimal):
        return str(value)
    if isinstance(value, int):
        return timestamps.render(value)
    text = str(value)
    if _BARE.match(text) and text not in KEYWORDS and not _NUMBER.match(text):
        return text
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _literal_key(value):
    return (type(value).__name__, str(value)) if not isinstance(value, int) else ("int", f"{value:020d}")


def render_predicate(p: Predicate) -> str:
    if isinstance(p.operand, frozenset):
        items = ", ".join(_render_scalar(v) for v in sorted(p.operand, key=_literal_key))
        operand = "{" + items + "}"
    else:
        operand = _render_scalar(p.operand)
    return f"{p.parameter} {p.operator.value} {operand}"


def render_clause(c: Clause) -> str:
    parts = [c.effect.value, c.action.value, "to", c.role.value]
    if c.scope:
        order = list(FactCategory)
        parts.append("scope " + ", ".join(cat.value for cat in sorted(c.scope, key=order.index)))
    if c.conditions:
        parts.append("when " + " and ".join(render_predicate(p) for p in c.conditions))
    if c.expires is not None:
        parts.append("expires " + timestamps.render(c.expires))
    if c.price is not None:
        parts.append(f"price {c.price}")
    if c.requires_attribution:
        parts.append("attribution")
    return " ".join(parts)


def render_policy(policy: UsagePolicy) -> str:
    return "".join(render_clause(c) + "\n" for c in policy.clauses)
