"""Acceptance criteria, one test each. Every test records a PASS/FAIL line.

Run directly (``python3 tests/test_acceptance.py``) or through pytest; in
the latter case the lines appear in the terminal summary.
"""

from __future__ import annotations

import functools
import itertools
import random
import sys
import tempfile
import time
from decimal import Decimal
from fractions import Fraction
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE_RESULTS, make_ctx  # noqa: E402
from oracles import (  # noqa: E402
    ACTIONS, CATEGORIES, DATES, DEVICES, LOCATIONS, ROLES, crossing_outcome, oracle_decide,
    oracle_filter, random_clause_text, random_policy_text, random_record,
)
from servicegen import drive  # noqa: E402

from phrusage.artifact import (  # noqa: E402
    AggregateSet, Filter, FactPredicate, License, ProvenanceEntry, aggregate, aggregate_decision,
    apply_filter, attribute_compensation, issue_bundle, request_use,
)
from phrusage.audit import AuditLog, head_of, parse_log, render_log, verify_chain  # noqa: E402
from phrusage.errors import AggregationDenied, ExpiredTerms, StaticScopeMismatch  # noqa: E402
from phrusage.marketplace import MarketplaceService, StorePaths, load, persist  # noqa: E402
from phrusage.model import Context, Environment, Fact, FactCategory, Record, RoleKind, Subject  # noqa: E402
from phrusage.negotiation import (  # noqa: E402
    AcceptThreshold, LinearConcession, Party, Proposal, open_session, run_automated,
)
from phrusage.policy import Action, Op, evaluate, explain_conflict, parse_policy  # noqa: E402
from phrusage.scenario import Scenario, run_scenario  # noqa: E402

ALL_ROLES = frozenset(RoleKind)
_OPS = {">=": Op.GE, "<": Op.LT, "=": Op.EQ}
CAT_SETS = [frozenset(), frozenset({FactCategory.LAB_MARKER}),
            frozenset({FactCategory.PSYCHIATRIC, FactCategory.VACCINATION}),
            frozenset({FactCategory.LAB_MARKER, FactCategory.PRESCRIPTION, FactCategory.GENETIC})]


def criterion(number: int, title: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run():
            try:
                detail = fn()
            except BaseException as exc:
                ACCEPTANCE_RESULTS[number] = f"criterion {number} FAIL  {title}: {exc}"
                print(ACCEPTANCE_RESULTS[number])
                raise
            ACCEPTANCE_RESULTS[number] = f"criterion {number} PASS  {title}: {detail}"
            print(ACCEPTANCE_RESULTS[number])
        return run
    return wrap


def _random_filter(rng: random.Random, fid: str) -> Filter:
    allowed = frozenset(rng.sample(CATEGORIES, rng.randint(0, len(CATEGORIES))))
    preds = []
    if rng.random() < 0.5:
        preds.append(FactPredicate("recorded_at", _OPS[rng.choice([">=", "<"])], rng.randint(0, 10**9)))
    if rng.random() < 0.3:
        preds.append(FactPredicate("author_subject", _OPS["="], rng.choice(["dr-a", "dr-b"])))
    return Filter(fid, allowed, tuple(preds))


@criterion(1, "subset law over filters and 2-deep compositions")
def test_subset_law():
    rng = random.Random(101)
    start = time.perf_counter()
    pairs = comps = 0
    for i in range(1000):
        record = random_record(rng, f"r{i}")
        everything = set(record.facts)
        filters = [_random_filter(rng, f"t{i}.{k}") for k in range(4)]
        for f in filters:
            fr = apply_filter(record, f)
            pairs += 1
            assert fr.facts <= everything
            expected = oracle_filter(record.facts, f.allowed_categories,
                                     [(p.field, p.operator.value, p.operand) for p in f.predicate])
            assert set(fr.facts) == expected
        for f, g in itertools.product(filters, repeat=2):
            once = apply_filter(record, f)
            twice = apply_filter(once, g)
            comps += 1
            assert twice.facts <= once.facts <= everything
            assert twice.source_record_id == record.record_id
    elapsed = time.perf_counter() - start
    assert elapsed < 10, f"took {elapsed:.1f}s"
    return f"{pairs} pairs, {comps} compositions, 0 violations, {elapsed:.2f}s"


@criterion(2, "evaluator equals brute-force oracle on the full grid")
def test_policy_oracle_grid():
    rng = random.Random(202)
    policies = [parse_policy(random_policy_text(rng), policy_id=f"g{i}") for i in range(24)]
    params = {"clearance": 2, "irb_approved": "1"}
    subject = Subject("s", "", params, ALL_ROLES)
    checked = 0
    for policy, role, device, location, action, date, cats in itertools.product(
            policies, ROLES, DEVICES, LOCATIONS, ACTIONS, DATES, CAT_SETS):
        env = Environment.of(date, location, device)
        got = evaluate(policy, action, cats, Context(subject, role, env), date)
        want = oracle_decide(policy.clauses, action, cats, role,
                             {"Date": date, "Location": location, "DeviceType": device.value},
                             params, date)
        assert (got.outcome.value, got.matched_clause) == want, (policy, role, device, location, action)
        checked += 1
    return (f"{len(policies)} policies x {len(ROLES)} roles x {len(DEVICES)} devices x "
            f"{len(LOCATIONS)} locations x {len(ACTIONS)} actions x {len(DATES)} dates x "
            f"{len(CAT_SETS)} category sets = {checked} exact matches")


def _full_record(record_id: str, owner: str) -> Record:
    facts = tuple(Fact(f"{record_id}-{c.value}", c, "dr", RoleKind.PHYSICIAN, 0, c.value)
                  for c in FactCategory)
    return Record(record_id, owner, facts, len(facts))


@criterion(3, "static policies: issue-time decision equals later request_use")
def test_static_equivalence():
    rng = random.Random(303)
    issued_at = DATES[0]
    record = _full_record("rec", "prod")
    fr = apply_filter(record, Filter("all", frozenset(FactCategory)))
    compared = 0
    for i in range(200):
        policy = parse_policy(random_policy_text(rng, static_only=True), issuer="prod")
        consumer = Subject("cons", "", {"clearance": rng.randint(0, 3),
                                        "irb_approved": rng.choice(["0", "1"])}, ALL_ROLES)
        bundle = issue_bundle(fr, policy, "prod", consumer, issued_at)
        later = [issued_at + rng.randint(1, 5 * 365 * 86400) for _ in range(10)]
        for role, action, cats in itertools.product(ROLES, ACTIONS, CAT_SETS):
            at_issue = evaluate(policy, action, cats, make_ctx(
                "cons", role, issued_at, params=consumer.parameters, roles=ALL_ROLES), issued_at)
            for t in later:
                ctx = make_ctx("cons", role, t, rng.choice(LOCATIONS), rng.choice(DEVICES),
                               params=consumer.parameters, roles=ALL_ROLES)
                d = request_use(bundle, action, cats, ctx, t)
                assert (d.outcome, d.obligations) == (at_issue.outcome, at_issue.obligations), \
                    (policy, role, action, cats)
                compared += 1
    return f"200 static policies, {compared} later requests, all equal to issue-time decisions"


def _aggregate_fixture(rng: random.Random, k: int):
    """k bundles licensed to broker 'hub', each from its own producer."""
    hub = Subject("hub", "", {"clearance": 1, "irb_approved": "1"}, ALL_ROLES)
    bundles = []
    while len(bundles) < k:
        n = len(bundles)
        producer = f"prod{n}"
        record = random_record(rng, f"rec{n}", producer, n_facts=rng.randint(1, 8))
        fr = apply_filter(record, Filter("f", frozenset(CATEGORIES)))
        lines = [f"permit {a.value} to broker" for a in ACTIONS if rng.random() < 0.8]
        lines += [random_clause_text(rng, role=rng.choice([RoleKind.BROKER, RoleKind.RESEARCHER]))
                  for _ in range(rng.randint(1, 3))]
        text = "\n".join(lines) + "\n"
        policy = parse_policy(text, issuer=producer)
        try:
            bundles.append(issue_bundle(fr, policy, producer, hub, DATES[0] - 86400 * 365))
        except (StaticScopeMismatch, ExpiredTerms):
            continue
    return hub, bundles


@criterion(4, "aggregate decisions are the conjunction of constituent decisions")
def test_aggregation_conjunction():
    rng = random.Random(404)
    contexts = permits = denials = refusals = 0
    for i in range(100):
        hub, bundles = _aggregate_fixture(rng, rng.randint(2, 5))
        agg = AggregateSet(tuple((b.payload.source_record_id, b.payload.facts) for b in bundles),
                           tuple(b.license for b in bundles))
        policies = [b.license.policy for b in bundles]
        for role, device, location, action, date in itertools.product(
                ROLES, DEVICES, LOCATIONS, ACTIONS, DATES):
            ctx = make_ctx("hub", role, date, location, device, params=hub.parameters, roles=ALL_ROLES)
            cats = agg.categories
            whole = aggregate_decision(agg, action, cats, ctx, date)
            parts = [request_use(b, action, cats, ctx, date) for b in bundles]
            assert whole.permitted == all(p.permitted for p in parts)
            contexts += 1
            permits += whole.permitted
            if not whole.permitted:
                denials += 1
                denied = {pid for pid, d in explain_conflict(policies, action, cats, ctx, date)
                          if not d.permitted}
                assert denied, "denial without a denying policy"
                assert denied == {p.policy_id for p, d in zip(policies, parts) if not d.permitted}
                assert whole.reason.split(":")[0] in denied
        ctx = make_ctx("hub", RoleKind.BROKER, DATES[1], "hospital", "certified",
                       params=hub.parameters, roles=ALL_ROLES)
        expected_ok = all(request_use(b, Action.AGGREGATE, b.categories, ctx, DATES[1]).permitted
                          for b in bundles)
        try:
            aggregate(bundles, Action.AGGREGATE, ctx, DATES[1])
            assert expected_ok
        except AggregationDenied as exc:
            refusals += 1
            assert not expected_ok
            assert exc.denying_policies and set(exc.denying_policies) <= {p.policy_id for p in policies}
    assert permits and denials
    return (f"100 aggregates, {contexts} contexts ({permits} permits, {denials} denials all explained), "
            f"{refusals} refused aggregations")


@criterion(5, "compensation sums exactly to the payment")
def test_compensation_conservation():
    rng = random.Random(505)
    policy_cache: dict[str, object] = {}
    for case in range(1000):
        k = rng.randint(1, 6)
        priced = rng.random() < 0.8
        licenses, weights, owner_exact = [], [], {}
        for j in range(k):
            producer = f"o{rng.randint(0, 4)}"
            policy = policy_cache.setdefault(producer, parse_policy("permit read to broker\n",
                                                                    issuer=producer))
            n_src = rng.randint(1, 3)
            cuts = sorted(Fraction(rng.randint(1, 99), 100) for _ in range(n_src - 1))
            shares = [b - a for a, b in zip([Fraction(0)] + cuts, cuts + [Fraction(1)])]
            if any(s == 0 for s in shares):
                shares = [Fraction(1)]
            owners = [f"o{rng.randint(0, 6)}" for _ in shares]
            prov = tuple(ProvenanceEntry(f"r{case}.{j}.{m}", o, s) for m, (o, s) in enumerate(zip(owners, shares)))
            price = Decimal(rng.randint(0, 50000)) / 100 if priced else None
            licenses.append(License(f"l{j}", producer, "hub", policy, 0, prov, price))
            weights.append(Fraction(price) if price is not None else Fraction(0))
        cents = rng.randint(0, 10**7)
        exact = [Fraction(w) for w in weights]
        if sum(exact) == 0:
            exact = [Fraction(1)] * k
        total_w = sum(exact)
        for lic, w in zip(licenses, exact):
            for entry in lic.provenance:
                owner_exact[entry.owner] = owner_exact.get(entry.owner, 0) + w / total_w * entry.share * cents
        payment = Decimal(cents) / 100
        split = attribute_compensation(AggregateSet((), tuple(licenses)), payment)
        assert sum(a for _, a in split) == payment, (case, split, payment)
        assert all(a == a.quantize(Decimal("0.01")) for _, a in split)
        for owner, amount in split:
            assert abs(Fraction(amount * 100) - owner_exact[owner]) < 1, (owner, amount)
    return "1000 cases, every split sums to the payment and is within a cent of proportional"


@criterion(6, "negotiation outcomes match the closed-form crossing analysis")
def test_negotiation_crossing():
    grid = list(itertools.product([1, 3, 5, 8], ["0.5", "1", "2"], [6, 10, 15], [4, 9, 12], [4, 8, 16]))
    policy = parse_policy("permit read to researcher scope lab_marker\n", issuer="prod")
    agreed = rejected = 0
    for start, step, limit, reserve, max_rounds in grid:
        consumer = LinearConcession(Decimal(start), Decimal(step), Decimal(limit))
        opening = consumer.offer(Party.CONSUMER, 1)
        proposal = Proposal("p", Party.CONSUMER, frozenset({FactCategory.LAB_MARKER}), policy, opening, 1)
        session = open_session("prod", "cons", "rec", proposal, max_rounds=max_rounds)
        final = run_automated(session, AcceptThreshold(Decimal(reserve)), consumer, seed=7)
        state, price, proposals = crossing_outcome(start, step, limit, reserve, max_rounds)
        assert final.state.value == state, (start, step, limit, reserve, max_rounds, final.state)
        assert len(final.history) <= max_rounds
        if state == "Agreed":
            agreed += 1
            assert Fraction(str(final.last.price)) == price
            assert len(final.history) == proposals
        else:
            rejected += 1
    return f"{len(grid)} parameterizations ({agreed} agreed, {rejected} rejected), all within max_rounds"


def _hundred_entry_log() -> AuditLog:
    log = AuditLog()
    for i in range(100):
        log.append(timestamp=1_700_000_000 + 60 * i, actor=f"actor{i % 7}",
                   event_kind=["fact_appended", "decision_rendered", "session_event"][i % 3],
                   detail={"record_id": f"rec-{i % 5}", "n": i, "note": "é" if i % 11 == 0 else "x"})
    return log


@criterion(7, "audit tamper detection for flips, deletions and reorders")
def test_audit_tamper_detection():
    log = _hundred_entry_log()
    entries = list(log.entries())
    head = head_of(entries)
    assert verify_chain(entries, head).ok
    data = render_log(entries).encode("utf-8")
    line_of = []
    for n, line in enumerate(data.split(b"\n")[:-1]):
        line_of.extend([n] * (len(line) + 1))
    flips = 0
    for pos in range(len(data)):
        for mask in (0x01, 0xFF):
            mutated = bytearray(data)
            mutated[pos] ^= mask
            report = verify_chain(parse_log(bytes(mutated)), head)
            assert not report.ok and report.first_bad <= line_of[pos], (pos, mask, report)
            flips += 1
    for i in range(len(entries)):
        report = verify_chain(entries[:i] + entries[i + 1:], head)
        assert not report.ok and report.first_bad <= i, ("delete", i, report)
    for i in range(len(entries) - 1):
        swapped = entries[:i] + [entries[i + 1], entries[i]] + entries[i + 2:]
        report = verify_chain(swapped, head)
        assert not report.ok and report.first_bad <= i, ("reorder", i, report)
    return f"{flips} byte flips, {len(entries)} deletions, {len(entries) - 1} reorders: 100% detected"


@criterion(8, "scenario transcripts are byte-identical across runs")
def test_scenario_transcripts():
    start = time.perf_counter()
    runs = {}
    for name in ("marketplace_negotiation", "broker_aggregation"):
        outputs = []
        for _ in range(2):
            lines, code = run_scenario(Scenario.named(name, seed=1))
            assert code == 0, "\n".join(lines)
            outputs.append("\n".join(lines).encode("utf-8"))
        assert outputs[0] == outputs[1], name
        runs[name] = outputs[0].decode()
    assert "session Agreed" in runs["marketplace_negotiation"]
    assert "variant compliant" in runs["broker_aggregation"]
    assert "conflict cause: " in runs["broker_aggregation"]
    elapsed = time.perf_counter() - start
    assert elapsed < 30
    return f"2 scenarios x 2 runs identical, {elapsed:.2f}s"


@criterion(9, "persisted service states load back equal with a valid chain")
def test_persistence_roundtrip():
    with tempfile.TemporaryDirectory() as tmp:
        for i in range(100):
            rng = random.Random(900 + i)
            service = MarketplaceService()
            drive(service, rng, steps=rng.randint(1, 14))
            state = service.snapshot()
            paths = StorePaths.under(Path(tmp) / f"s{i}")
            persist(state, paths)
            back = load(paths)
            assert back == state, i
            assert verify_chain(back.audit, head_of(back.audit)).ok
    return "100 generated states round-trip with structural equality"


if __name__ == "__main__":
    failed = 0
    for fn in (test_subset_law, test_policy_oracle_grid, test_static_equivalence,
               test_aggregation_conjunction, test_compensation_conservation,
               test_negotiation_crossing, test_audit_tamper_detection,
               test_scenario_transcripts, test_persistence_roundtrip):
        try:
            fn()
        except Exception:
            failed += 1
    sys.exit(1 if failed else 0)
