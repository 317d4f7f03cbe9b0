"""Command-line operator tool.

Exit codes: 0 success or permit, 1 domain denial or failure (including a
tampered audit log), 2 usage, parse or store errors.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading
from dataclasses import replace
from pathlib import Path

from . import timestamps
from .audit import edit_history, read_log_file
from .errors import PolicySyntaxError, PolicyTypeError, StoreError, UsageError
from .marketplace import StorePaths, serve
from .model import Context, DeviceType, Environment, FactCategory, RoleKind, Subject
from .policy import Action, Decision, evaluate, parse_policy, render_clause, render_policy
from .scenario import SCENARIOS, Scenario, run_scenario

EXIT_OK, EXIT_DENY, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    """Reported on stderr with exit code 2."""


def _emit(text: str = "") -> None:
    sys.stdout.write(text + "\n")


def _read_policy(path: str):
    try:
        source = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror}") from None
    try:
        return parse_policy(source, policy_id=Path(path).stem)
    except (PolicySyntaxError, PolicyTypeError) as exc:
        raise CliError(f"{path}:{exc.lineno}:{exc.offset}: {exc.msg}") from None


def _read_context(path: str) -> Context:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        env = dict(data["environment"])
        if isinstance(env.get("Date"), str):
            env["Date"] = timestamps.parse(env["Date"])
        subject = Subject.from_dict(data["subject"])
        return Context(subject, RoleKind(data["role"]), Environment(env))
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror}") from None
    except (KeyError, ValueError, TypeError, UsageError) as exc:
        raise CliError(f"{path}: bad context: {exc}") from None


def _now(args, ctx: Context | None = None) -> int:
    if args.now is not None:
        return args.now
    if ctx is not None:
        return ctx.environment.date
    raise CliError("--now is required")


def _categories(text: str) -> list[FactCategory]:
    try:
        return [FactCategory(c.strip()) for c in text.split(",") if c.strip()]
    except ValueError as exc:
        raise CliError(str(exc)) from None


def render_decision(policy, decision: Decision) -> str:
    parts = [decision.outcome.value, decision.reason]
    if decision.matched_clause is not None:
        parts.append("clause: " + render_clause(policy.clauses[decision.matched_clause]))
    if decision.obligations.price is not None:
        parts.append(f"price: {decision.obligations.price}")
    if decision.obligations.attribution:
        parts.append("attribution: required")
    return "\n".join(parts)


def grid_rows(policy, ctx: Context, action: Action, categories, now: int) -> list[tuple[str, str, str]]:
    """Evaluate over every role and device type, holding the rest of the context fixed."""
    subject = replace(ctx.subject, verified_roles=frozenset(RoleKind))
    rows = []
    for role in RoleKind:
        for device in DeviceType:
            env = Environment({**ctx.environment.parameters, "DeviceType": device.value})
            d = evaluate(policy, action, categories, Context(subject, role, env), now)
            rows.append((role.value, device.value, d.outcome.value))
    return rows


def cmd_eval(args) -> int:
    policy = _read_policy(args.policy_file)
    ctx = _read_context(args.context_file)
    try:
        action = Action(args.action)
    except ValueError:
        raise CliError(f"unknown action {args.action!r}") from None
    cats = _categories(args.categories)
    now = _now(args, ctx)
    if args.grid:
        rows = grid_rows(policy, ctx, action, cats, now)
        _emit("role\tdevice\toutcome")
        for row in rows:
            _emit("\t".join(row))
        return EXIT_OK if any(r[2] == "permit" for r in rows) else EXIT_DENY
    decision = evaluate(policy, action, cats, ctx, now)
    _emit(render_decision(policy, decision))
    return EXIT_OK if decision.permitted else EXIT_DENY


def cmd_parse(args) -> int:
    policy = _read_policy(args.policy_file)
    _emit(render_policy(policy).rstrip("\n"))
    return EXIT_OK


def cmd_scenario(args) -> int:
    names = SCENARIOS if args.name == "all" else (args.name,)
    code = EXIT_OK
    for i, name in enumerate(names):
        store = None
        if args.store is not None:
            store = Path(args.store) / name if len(names) > 1 else Path(args.store)
        fixtures = Path(args.fixtures) if args.fixtures else None
        try:
            lines, rc = run_scenario(Scenario.named(name, args.seed, fixtures), store)
        except FileNotFoundError as exc:
            raise CliError(str(exc)) from None
        if i:
            _emit()
        for line in lines:
            _emit(line)
        code = max(code, rc)
    return code


def _audit_file(args) -> Path:
    if args.store is None:
        raise CliError("audit needs --store")
    path = StorePaths.under(args.store).audit_file
    if not path.exists():
        raise CliError(f"no audit log at {path}")
    return path


def cmd_audit(args) -> int:
    entries, report = read_log_file(_audit_file(args))
    if args.audit_command == "verify":
        _emit(str(report))
        return EXIT_OK if report.ok else EXIT_DENY
    if not report.ok:
        _emit(str(report))
        return EXIT_DENY
    for e in edit_history(entries, args.record_id):
        _emit("\t".join([str(e.sequence), timestamps.render(e.timestamp), e.actor,
                         e.event_kind, json.dumps(e.payload(), sort_keys=True)]))
    return EXIT_OK


def _bind_address(text: str):
    host, sep, port = text.rpartition(":")
    if sep and port.isdigit():
        return (host or "127.0.0.1", int(port))
    return text


def cmd_serve(args) -> int:
    if args.store is None:
        raise CliError("serve needs --store")
    clock = (lambda: args.now) if args.now is not None else None
    handle = serve(_bind_address(args.bind), args.store, clock)
    _emit(f"listening on {handle.address}")
    sys.stdout.flush()
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass
    finally:
        handle.stop()
    return EXIT_OK


def _rfc3339(text: str) -> int:
    try:
        return timestamps.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phrusage", description=__doc__.splitlines()[0])
    parser.add_argument("--store", metavar="DIR", help="store root directory")
    parser.add_argument("--seed", type=int, default=0, metavar="N")
    parser.add_argument("--now", type=_rfc3339, metavar="RFC3339", help="evaluation time")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="evaluate a policy for one request")
    p.add_argument("policy_file")
    p.add_argument("context_file", help="JSON with subject, role and environment")
    p.add_argument("action", choices=[a.value for a in Action])
    p.add_argument("categories", help="comma-separated fact categories")
    p.add_argument("--grid", action="store_true", help="tabulate over all roles and device types")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("parse", help="check policy syntax and print the canonical form")
    p.add_argument("policy_file")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("scenario", help="run a scripted scenario")
    p.add_argument("name", choices=SCENARIOS + ("all",))
    p.add_argument("--fixtures", metavar="DIR", help="alternative fixture root")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("audit", help="verify the audit log or show a record's edits")
    audit_sub = p.add_subparsers(dest="audit_command", required=True)
    audit_sub.add_parser("verify")
    h = audit_sub.add_parser("history")
    h.add_argument("record_id")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("serve", help="run the marketplace service")
    p.add_argument("--bind", default="127.0.0.1:7878", help="HOST:PORT or a Unix socket path")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (CliError, StoreError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except UsageError as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
