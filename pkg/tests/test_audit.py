import pytest
from hypothesis import given, strategies as st

from phrusage.audit import (
    GENESIS_HASH, AuditEntry, AuditLog, ChainHead, edit_history, head_of, head_path, parse_log,
    read_log_file, render_log, verify_chain,
)
from phrusage.errors import StoreCorrupt, VersionMismatch
from phrusage.storefmt import STORE_HEADER


def build(n=10):
    log = AuditLog()
    for i in range(n):
        log.append(timestamp=i, actor=f"a{i % 3}", event_kind="fact_appended" if i % 2 else "session_event",
                   detail={"record_id": f"r{i % 2}", "i": i})
    return log


def test_genesis_and_links():
    entries = build(3).entries()
    assert entries[0].prev_hash == GENESIS_HASH
    assert entries[1].prev_hash == entries[0].entry_hash
    assert all(e.recompute() == e.entry_hash for e in entries)


def test_empty_chain_is_ok():
    assert verify_chain([], head_of([])).ok


def test_report_rendering():
    log = build(4)
    assert str(log.verify()) == "ok"
    entries = list(log.entries())
    entries[2] = AuditEntry(2, 99, entries[2].actor, entries[2].event_kind, entries[2].detail,
                            entries[2].prev_hash, entries[2].entry_hash)
    assert str(verify_chain(entries)) == "Tampered(2)"


def test_unknown_event_kind():
    with pytest.raises(ValueError):
        AuditLog().append(timestamp=0, actor="x", event_kind="gossip", detail={})


def test_strict_line_parsing():
    line = build(1).entries()[0].to_line()
    assert AuditEntry.from_line(line).to_line() == line
    for bad in (line.replace("\t", " ", 1), "01" + line[1:], line.replace('{"i":0', '{ "i":0')):
        with pytest.raises(ValueError):
            AuditEntry.from_line(bad)


def test_truncation_needs_the_head():
    entries = list(build(5).entries())
    head = head_of(entries)
    assert verify_chain(entries[:-1]).ok  # undetectable without a head
    assert verify_chain(entries[:-1], head).first_bad == 4
    assert verify_chain(entries + [entries[-1]], head).first_bad is not None


def test_edit_history_projects_mutations():
    history = edit_history(build(10).entries(), "r1")
    assert [e.sequence for e in history] == [1, 3, 5, 7, 9]


def test_file_write_through_and_reopen(tmp_path):
    path = tmp_path / "audit.log"
    log = AuditLog.open(path)
    for i in range(3):
        log.append(timestamp=i, actor="a", event_kind="fact_appended", detail={"record_id": "r", "i": i})
    entries, report = read_log_file(path)
    assert report.ok and entries == list(log.entries())
    assert head_path(path).read_text().splitlines() == [STORE_HEADER, head_of(entries).to_line()]
    assert len(AuditLog.open(path)) == 3


def test_tampered_file_refuses_to_open(tmp_path):
    path = tmp_path / "audit.log"
    build(5).save(path)
    text = path.read_text()
    path.write_text(text.replace('"i":2', '"i":7'))
    entries, report = read_log_file(path)
    assert str(report) == "Tampered(2)"
    with pytest.raises(StoreCorrupt):
        AuditLog.open(path)


def test_deleted_last_line_detected_on_disk(tmp_path):
    path = tmp_path / "audit.log"
    build(5).save(path)
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[:-1]))
    assert str(read_log_file(path)[1]) == "Tampered(4)"


def test_future_version(tmp_path):
    path = tmp_path / "audit.log"
    build(2).save(path)
    path.write_text(path.read_text().replace("v1", "v2", 1))
    with pytest.raises(VersionMismatch):
        read_log_file(path)


def test_head_line_format():
    head = ChainHead(3, "ab" * 32)
    assert ChainHead.from_line(head.to_line()) == head
    with pytest.raises(ValueError):
        ChainHead.from_line("3\tnot-a-hash")


@given(st.lists(st.dictionaries(st.text(max_size=5), st.integers() | st.text(max_size=8), max_size=3),
                min_size=1, max_size=15),
       st.data())
def test_any_single_edit_is_detected(details, data):
    log = AuditLog()
    for i, d in enumerate(details):
        log.append(timestamp=i, actor="aé", event_kind="decision_rendered", detail=d)
    entries = list(log.entries())
    head = head_of(entries)
    raw = render_log(entries).encode()
    assert verify_chain(parse_log(raw), head).ok
    pos = data.draw(st.integers(0, len(raw) - 1))
    mutated = bytearray(raw)
    mutated[pos] ^= data.draw(st.integers(1, 255))
    line = raw[:pos].count(b"\n")
    report = verify_chain(parse_log(bytes(mutated)), head)
    assert not report.ok and report.first_bad <= line
