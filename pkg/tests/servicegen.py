"""Random operation sequences against a marketplace service, for store tests."""

from __future__ import annotations

import random

from phrusage.marketplace import LocalClient, MarketplaceService
from phrusage.model import FactCategory
from phrusage.negotiation import Party, Proposal
from phrusage.policy import parse_policy

T0 = 1_767_225_600  # 2026-01-01


def ctx(subject, role, at=T0, location="hospital", device="certified"):
    return {"subject_id": subject, "role": role,
            "environment": {"Date": at, "Location": location, "DeviceType": device}}


def drive(service: MarketplaceService, rng: random.Random, steps: int = 12) -> LocalClient:
    """Populate ``service`` with a small random history; every call must succeed."""
    c = LocalClient(service)

    def ok(kind, **payload):
        r = c.call(kind, **payload)
        assert r["ok"], (kind, r)
        return r["payload"]

    n_patients = rng.randint(1, 3)
    patients = [f"p{i}" for i in range(n_patients)]
    for p in patients:
        ok("register_subject", subject_id=p, display_name=f"Patient {p}")
    ok("register_subject", subject_id="dr", verified_roles=["physician"], credentials_verified=True)
    ok("register_subject", subject_id="lab", verified_roles=["researcher"],
       parameters={"irb_approved": "1"})
    facts: dict[str, list[str]] = {}
    for p in patients:
        ok("create_record", record_id=f"rec-{p}", owner=p)
        facts[p] = []
    serial = 0
    for _ in range(steps):
        p = rng.choice(patients)
        rid = f"rec-{p}"
        move = rng.random()
        if move < 0.5 or not facts[p]:
            serial += 1
            cat = rng.choice([c for c in FactCategory if c is not FactCategory.CONTACT_INFO])
            fact = {"fact_id": f"f{serial}", "category": cat.value, "author_subject": "dr",
                    "author_role": "physician", "recorded_at": T0 + serial, "body": f"note {serial}\ttab"}
            ok("append_fact", record_id=rid, fact=fact, context=ctx("dr", "physician"))
            facts[p].append(f"f{serial}")
        elif move < 0.65:
            serial += 1
            old = facts[p].pop(rng.randrange(len(facts[p])))
            rec = service.state.records[rid]
            cat = rec.fact(old).category.value
            fact = {"fact_id": f"f{serial}", "category": cat, "author_subject": "dr",
                    "author_role": "physician", "recorded_at": T0 + serial, "body": f"fix {serial}"}
            ok("supersede_fact", record_id=rid, old_id=old, fact=fact, context=ctx("dr", "physician"))
            facts[p].append(f"f{serial}")
        else:
            record = service.state.records[rid]
            cats = sorted(c.value for c in record.categories)
            if not cats:
                continue
            pick = rng.sample(cats, rng.randint(1, len(cats)))
            lid = f"lst-{p}-{serial}"
            if lid not in service.state.listings:
                ok("create_listing", listing_id=lid, producer=p, record_id=rid,
                   advertised_categories=pick, blurb="random", contact=p)
            scope = ", ".join(pick)
            policy = parse_policy(f"permit read to researcher scope {scope} price 2\n"
                                  "deny redistribute to researcher\n", issuer=p)
            serial += 1
            prop = Proposal(f"prop-{serial}", Party.CONSUMER, frozenset(FactCategory(x) for x in pick),
                            policy, rng.randint(1, 9), 1)
            s = ok("open_session", producer=p, consumer="lab", record_id=rid,
                   proposal=prop.to_dict(), now=T0 + serial)
            verdict = rng.choice(["accept", "reject", "counter"])
            if verdict == "counter":
                counter = prop.countered(Party.PRODUCER, 2, price=10)
                ok("respond", session_id=s["session_id"], party="producer", response="counter",
                   proposal=counter.to_dict(), now=T0 + serial)
                ok("respond", session_id=s["session_id"], party="consumer", response="accept",
                   now=T0 + serial)
            else:
                ok("respond", session_id=s["session_id"], party="producer", response=verdict,
                   now=T0 + serial)
            if verdict != "reject":
                b = ok("fetch_bundle", session_id=s["session_id"], subject_id="lab", now=T0 + serial)
                ok("request_use", bundle_id=b["bundle_id"], action="read", categories=pick,
                   context=ctx("lab", "researcher", T0 + serial + 1), now=T0 + serial + 1)
    return c
