"""Usage-policy language and decision procedure."""

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
from .evaluate import (
    DEFAULT_DENY,
    classify_clauses,
    denying,
    evaluate,
    evaluate_clauses,
    explain_conflict,
    predicate_holds,
    resolve_static,
)
from .parser import parse_clauses, parse_policy, render_clause, render_policy

__all__ = [
    "Action", "AnyPolicy", "Clause", "CompositePolicy", "Decision", "Effect", "Obligations",
    "Op", "Predicate", "UsagePolicy", "DEFAULT_DENY", "classify_clauses", "denying",
    "evaluate", "evaluate_clauses", "explain_conflict", "predicate_holds", "resolve_static",
    "parse_clauses", "parse_policy", "render_clause", "render_policy",
]
