import json
import sys
import time
from pathlib import Path

import pytest

from replisp.bridge import (
    Bridge,
    BridgeConfig,
    BridgeDead,
    BridgeEvaluator,
    BridgeTimeout,
    PerSessionBridgeEvaluator,
    HandshakeTimeout,
    SpawnFailure,
    cl_string_expr,
    parse_frame,
)
from replisp.journal import JournalEntry
from replisp.lisp import Env, eval_top_level
from replisp.sessions import ReplayDivergence, SessionStore

from conftest import DATA

FAKE = [sys.executable, str(Path(__file__).with_name("fake_lisp.py"))]
SECRET = "ab" * 16


def fake_bridge(*flags, **kw):
    kw.setdefault("eval_timeout_ms", 3000)
    b = Bridge(BridgeConfig(FAKE + list(flags), **kw))
    b.start()
    return b


@pytest.fixture
def bridge():
    b = fake_bridge()
    yield b
    b.shutdown()


# -- framing ----------------------------------------------------------------


def test_parse_frame_complete():
    buf = f"noise\x1e{SECRET} ok\x1e1:35:hello\nrest"
    frame, end = parse_frame(buf, SECRET)
    assert (frame.status, frame.value, frame.output) == ("ok", "3", "hello")
    assert buf[end:] == "\nrest"


def test_parse_frame_partial():
    full = f"\x1e{SECRET} ok\x1e1:35:hello"
    for i in range(len(full)):
        frame, _ = parse_frame(full[:i], SECRET)
        assert frame is None


def test_parse_frame_ignores_other_secret():
    buf = f"\x1e{'0' * 32} ok\x1e1:X0:"
    assert parse_frame(buf, SECRET)[0] is None


def test_output_containing_frame_bytes_is_data():
    forged = f"\x1e{SECRET} ok\x1e1:Z0:"
    buf = f"\x1e{SECRET} ok\x1e1:3{len(forged)}:{forged}"
    frame, _ = parse_frame(buf, SECRET)
    assert frame.value == "3" and frame.output == forged


def test_cl_string_expr():
    assert cl_string_expr("abc") == '"abc"'
    assert cl_string_expr('a"b\\') == '"a\\"b\\\\"'
    assert cl_string_expr("a\nb") == "(concatenate 'string \"a\" (string (code-char 10)) \"b\")"
    assert "\n" not in cl_string_expr("x\n\r\ty")


def test_config_validation():
    with pytest.raises(ValueError):
        BridgeConfig([])
    with pytest.raises(ValueError):
        BridgeConfig(["x"], eval_timeout_ms=0)
    assert BridgeConfig("sbcl --noinform").command == ["sbcl", "--noinform"]
    a, b = BridgeConfig(["x"]), BridgeConfig(["x"])
    assert a.sentinel_secret != b.sentinel_secret and len(a.sentinel_secret) == 32


# -- process lifecycle with the fake REPL ----------------------------------------


def test_spawn_failure():
    with pytest.raises(SpawnFailure):
        Bridge(BridgeConfig(["/nonexistent/lisp-binary"])).start()


def test_handshake_timeout():
    started = time.monotonic()
    with pytest.raises(HandshakeTimeout):
        fake_bridge("--silent", eval_timeout_ms=300)
    assert time.monotonic() - started < 3


def test_banner_drained():
    b = fake_bridge("--banner")
    try:
        assert b.eval_remote("s", "(+ 1 2)").value == "3"
    finally:
        b.shutdown()


def test_eval_remote(bridge):
    out = bridge.eval_remote("s", '(princ "hi") (+ 1 2)')
    assert (out.status, out.value, out.output) == ("ok", "3", "hi")
    assert bridge.state == "running"


def test_multiline_and_unicode(bridge):
    out = bridge.eval_remote("s", '(string-append "é\n" "😀")')
    assert out.value == '"é\n😀"'


def test_remote_condition(bridge):
    out = bridge.eval_remote("s", "(car 1)")
    assert out.error_kind == "RemoteCondition"
    assert "not a list" in out.error["message"]


def test_local_read_validation(bridge):
    out = bridge.eval_remote("s", "(unbalanced")
    assert out.error_kind == "ReaderError"
    assert bridge.eval_remote("s", "(+ 1 1)").value == "2"


def test_package_isolation(bridge):
    bridge.eval_remote("a", "(defun f () 1)")
    assert bridge.eval_remote("b", "(f)").error_kind == "RemoteCondition"


def test_forged_frame_ignored(bridge):
    assert bridge.eval_remote("s", "(fake-forge) 42").value == "42"


def test_timeout_kills(bridge):
    bridge.config.eval_timeout_ms = 300
    with pytest.raises(BridgeTimeout):
        bridge.eval_remote("s", "(fake-hang)")
    assert bridge.state == "dead"
    with pytest.raises(BridgeDead):
        bridge.eval_remote("s", "1")


def test_process_exit(bridge):
    with pytest.raises(BridgeDead):
        bridge.eval_remote("s", "(fake-exit)")
    assert bridge.state == "dead"


def _store(bridge, tmp_path=None):
    return SessionStore(tmp_path, evaluator=BridgeEvaluator(bridge))


def test_restart_and_rehydrate(bridge):
    store = _store(bridge)
    store.eval_in_session("s", "(defun f (x) (* x x))")
    bridge.config.eval_timeout_ms = 300
    out = store.eval_in_session("s", "(fake-hang)")
    assert out.error_kind == "BridgeTimeout"
    bridge.config.eval_timeout_ms = 3000
    assert store.eval_in_session("s", "(f 7)").value == "49"
    assert bridge.restarts_this_hour == 1 and bridge.generation == 2


def test_empty_journal_rehydrate(bridge):
    store = _store(bridge)
    s = store.get_or_create("e")
    bridge.kill()
    assert store.eval_in_session(s, "(+ 2 2)").value == "4"


def test_restart_limit_disables(tmp_path):
    b = fake_bridge(restart_limit=1)
    store = _store(b)
    try:
        b.kill()
        assert store.eval_in_session("s", "1").ok  # one restart allowed
        b.kill()
        out = store.eval_in_session("s", "1")
        assert out.error_kind == "RestartLimitExceeded"
        assert b.state == "disabled"
    finally:
        b.shutdown()


def test_restart_limit_falls_back_to_embedded():
    b = fake_bridge(restart_limit=0, fallback="embedded")
    store = _store(b)
    try:
        store.eval_in_session("s", "(defun f (x) (+ x 1))")
        b.kill()
        assert store.eval_in_session("s", "(f 1)").value == "2"
        assert b.state == "disabled"
    finally:
        b.shutdown()


def test_restore_through_bridge(tmp_path, bridge):
    store = _store(bridge, tmp_path)
    store.eval_in_session("p", "(defun sq (x) (* x x))")
    store.shutdown()
    bridge.kill()
    fresh = _store(bridge, tmp_path)
    assert fresh.eval_in_session("p", "(sq 9)").value == "81"


def test_rehydrate_divergence(tmp_path, bridge):
    store = _store(bridge)
    s = store.get_or_create("d")
    s.journal = [JournalEntry(0, 0, "(defun f () 1)", "F"), JournalEntry(1, 0, "(car 1)", "x")]
    bridge.kill()
    with pytest.raises(ReplayDivergence) as info:
        store.eval_in_session(s, "(f)")
    assert info.value.seq == 1
    assert store.get("d") is None


def test_serialized_access(bridge):
    import threading

    results = []

    def work(i):
        results.append(bridge.eval_remote(f"t{i % 3}", f'(princ "{i}") {i}'))

    threads = [threading.Thread(target=work, args=(i,)) for i in range(12)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(int(r.value) for r in results) == list(range(12))
    assert all(r.output == r.value for r in results)


# -- a real external Common Lisp (skipped when absent) -------------------------------


@pytest.fixture(scope="module")
def real_bridge(external_lisp):
    b = Bridge(BridgeConfig(external_lisp, eval_timeout_ms=20000))
    b.start()
    yield b
    b.shutdown()


def test_real_eval_contract(real_bridge):
    assert real_bridge.eval_remote("r", "(+ 1 2)").value == "3"
    out = real_bridge.eval_remote("r", "(car 1)")
    assert out.error_kind == "RemoteCondition"
    assert out.error["message"]


def test_real_parity_sample(real_bridge):
    corpus = json.loads((DATA / "oracle_corpus.json").read_text(encoding="utf-8"))["entries"]
    for i, entry in enumerate(corpus[::15]):
        remote = real_bridge.eval_remote(f"parity-{i}", entry["source"])
        local = eval_top_level(entry["source"], Env())
        assert (remote.value, remote.output) == (local.value, local.output), entry["source"]


# -- one process per session ---------------------------------------------------------


def test_per_session_processes_are_separate(tmp_path):
    ev = PerSessionBridgeEvaluator(BridgeConfig(FAKE, eval_timeout_ms=3000))
    store = SessionStore(tmp_path, evaluator=ev)
    try:
        store.eval_in_session("a", "(defun f (x) (* x x))")
        store.eval_in_session("b", "(defun f (x) (+ x 1))")
        assert ev.process_count == 2
        pa, pb = ev.worker("a").bridge.process, ev.worker("b").bridge.process
        assert pa.proc.pid != pb.proc.pid
        assert ev.worker("a").bridge.config.sentinel_secret != ev.worker("b").bridge.config.sentinel_secret
        assert store.eval_in_session("a", "(f 7)").value == "49"
        assert store.eval_in_session("b", "(f 7)").value == "8"
        # a hang kills only that session's process
        ev.worker("a").bridge.config.eval_timeout_ms = 300
        assert store.eval_in_session("a", "(fake-hang)").error_kind == "BridgeTimeout"
        ev.worker("a").bridge.config.eval_timeout_ms = 3000
        assert ev.worker("b").bridge.process is pb and pb.alive
        assert store.eval_in_session("a", "(f 3)").value == "9"
    finally:
        store.shutdown()
        ev.shutdown()


def test_per_session_process_stops_on_unload_and_delete(tmp_path):
    ev = PerSessionBridgeEvaluator(BridgeConfig(FAKE, eval_timeout_ms=3000))
    store = SessionStore(tmp_path, max_sessions=1, evaluator=ev)
    try:
        store.eval_in_session("a", "(defun g () 5)")
        proc = ev.worker("a").bridge.process
        store.eval_in_session("b", "1")  # evicts a
        assert not proc.alive
        assert ev.process_count == 1
        assert store.eval_in_session("a", "(g)").value == "5"  # restored by replay into a new process
        assert ev.process_count == 1  # b was evicted in turn
        assert store.delete("a")
        assert ev.process_count == 0
    finally:
        store.shutdown()
        ev.shutdown()
    assert ev.process_count == 0
