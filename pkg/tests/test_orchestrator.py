import asyncio
import random
import time

import pytest

from replisp.backend import (
    GenerationRequest,
    MockBackend,
    MockRound,
    MockScript,
    MockTurn,
    TokenEvent,
    BackendStream,
)
from replisp.lisp import EvalBudget
from replisp.orchestrator import (
    BACKEND_ERROR,
    COMPLETED,
    EVAL_LIMIT,
    ROUND_LIMIT,
    SCANNER_ERROR,
    Orchestrator,
    SplicePolicy,
    TurnLimits,
    splice_text,
    terminal_annotation,
)
from replisp.scanner import ERROR
from replisp.sessions import SessionStore

from splice_oracle import expected_splice, script_for


def request(content="q", **params):
    return GenerationRequest("m", [{"role": "user", "content": content}], params)


def run_turn(script, *, store=None, session="s", limits=None, policy=None, backend=None, **kw):
    store = store or SessionStore()
    backend = backend or MockBackend(script)
    orch = Orchestrator(backend, store, policy=policy, limits=limits, **kw)
    sess = store.get_or_create(session)
    text, trace = asyncio.run(orch.collect(request(), sess))
    return text, trace, backend


def test_x_equals_3():
    text, trace, mock = run_turn(MockScript.single((None, ["x = <lisp>(+ 1 2)</lisp>"]), ("x = 3", [". Done."])))
    assert text == "x = 3. Done."
    assert trace.status == COMPLETED
    assert trace.eval_count == 1 and len(trace.rounds) == 2
    mock.verify_complete()


def test_spec_script_with_dot_in_closing_chunk():
    script = MockScript.single((None, ["x = <lisp>(+ 1 2)</lisp>."]), ("x = 3.", [" Done."]))
    text, trace, mock = run_turn(script)
    assert text == "x = 3. Done."
    assert (trace.eval_count, len(trace.rounds), trace.status) == (1, 2, COMPLETED)
    mock.verify_complete()


def test_passthrough_byte_identical():
    chunks = ["Hello <", "li", "sp is", " nice <thinking>", "x</thinking> \U0001F600"]
    text, trace, _ = run_turn(MockScript.single((None, chunks)))
    assert text == "".join(chunks)
    assert (trace.eval_count, len(trace.rounds), trace.status) == (0, 1, COMPLETED)


def test_context_equals_client_text():
    script = script_for("a <lisp>(princ 1) 2</lisp> b <lisp>(car 1)</lisp> c")
    text, trace, mock = run_turn(script)
    prefixes = [r.prefix for r in mock.requests[1:]]
    assert all(text.startswith(p) for p in prefixes)
    assert text == "a 1\n2 b #<error: TypeError 1 is not a list> c"


@pytest.mark.parametrize("seed", range(20))
def test_splice_correctness_random(seed):
    rng = random.Random(seed)
    pieces = ["plain ", "<lisp>(+ 1 2)</lisp>", "<lisp>(defun f (x) (* x 2))</lisp>", "<lisp>(f 21)</lisp>",
              "<lisp>(princ \"p\")</lisp>", "<lisp></lisp>", "<lisp>(nope)</lisp>", " <lispy> ", "é", "\n", "</lis"]
    text = "".join(rng.choice(pieces) for _ in range(rng.randint(0, 12)))
    out, trace, mock = run_turn(script_for(text, rng), limits=TurnLimits(16, 32))
    assert out == expected_splice(text)
    assert trace.status == COMPLETED
    mock.verify_complete()


def test_error_splice_continues():
    script = MockScript.single((None, ["<lisp>(car 1)</lisp>"]), ("#<error: TypeError 1 is not a list>", [" fixed"]))
    text, trace, _ = run_turn(script)
    assert text.endswith(" fixed") and trace.status == COMPLETED


def test_unterminated_not_evaluated():
    text, trace, _ = run_turn(MockScript.single((None, ["a <lisp>(defun evil () 1)"])))
    assert text == "a <lisp>(defun evil () 1)"
    assert trace.eval_count == 0 and trace.status == COMPLETED


def test_unterminated_error_policy():
    text, trace, _ = run_turn(MockScript.single((None, ["a <lisp>(x"])), unterminated=ERROR)
    assert trace.status == SCANNER_ERROR
    assert text == "a " + terminal_annotation(SCANNER_ERROR)


def test_code_too_long():
    text, trace, _ = run_turn(MockScript.single((None, ["<lisp>" + "1 " * 100])), max_code_bytes=50)
    assert trace.status == SCANNER_ERROR and trace.eval_count == 0


def test_eval_limit_exact():
    script = MockScript([MockTurn(rounds=[MockRound(None, ["<lisp>(+ 1 1)</lisp>"], repeat=-1)])])
    text, trace, _ = run_turn(script, limits=TurnLimits(max_rounds=16, max_evals=16))
    assert trace.status == EVAL_LIMIT
    assert trace.eval_count == 16
    assert text == "2" * 16 + terminal_annotation(EVAL_LIMIT)


def test_seventeen_blocks_in_one_stream():
    emit = ["<lisp>(+ 1 1)</lisp>"] * 17
    rounds = [MockRound(None, emit)] + [MockRound(None, emit[i + 1:]) for i in range(16)]
    text, trace, _ = run_turn(MockScript([MockTurn(rounds=rounds)]), limits=TurnLimits(16, 16))
    assert (trace.status, trace.eval_count) == (EVAL_LIMIT, 16)
    assert text.endswith(terminal_annotation(EVAL_LIMIT))


def test_round_limit():
    script = MockScript([MockTurn(rounds=[MockRound(None, ["<lisp>1</lisp>"], repeat=-1)])])
    text, trace, _ = run_turn(script, limits=TurnLimits(max_rounds=3, max_evals=10))
    assert trace.status == ROUND_LIMIT
    assert len(trace.rounds) == 4 and trace.eval_count == 4
    assert text == "1111" + terminal_annotation(ROUND_LIMIT)


def test_bounded_work_random_limits():
    script = MockScript([MockTurn(rounds=[MockRound(None, ["x<lisp>1</lisp>y<lisp>2</lisp>"], repeat=-1)])])
    rng = random.Random(3)
    for _ in range(10):
        r = rng.randint(1, 6)
        limits = TurnLimits(r, r + rng.randint(0, 6))
        _, trace, _ = run_turn(script, limits=limits)
        assert trace.eval_count <= limits.max_evals
        assert len(trace.rounds) - 1 <= limits.max_rounds


def test_backend_error_status():
    script = MockScript([MockTurn(rounds=[MockRound(None, [], status=500)])])
    text, trace, _ = run_turn(script)
    assert trace.status == BACKEND_ERROR and text == ""
    assert "500" in trace.error


def test_backend_error_mid_turn_keeps_text():
    script = MockScript([MockTurn(rounds=[MockRound(None, ["a<lisp>1</lisp>"]), MockRound(None, [], status=503)])])
    text, trace, _ = run_turn(script)
    assert text == "a1" and trace.status == BACKEND_ERROR


def test_prefill_unsupported_stops_after_splice():
    mock = MockBackend(MockScript.single((None, ["v=<lisp>(+ 2 2)</lisp>"])), prefill_supported=False)
    text, trace, _ = run_turn(None, backend=mock)
    assert text == "v=4" and trace.status == COMPLETED and len(trace.rounds) == 1


def test_remainder_after_close_forwarded_and_in_context():
    script = MockScript.single((None, ["<lisp>(+ 1 2)</lisp> and more", " dropped"]), ("3 and more", ["!"]))
    text, trace, mock = run_turn(script)
    assert text == "3 and more!"
    mock.verify_complete()


def test_annotated_views():
    policy = SplicePolicy(client_view="annotated", context_view="annotated")
    script = MockScript.single((None, ["x <lisp>(+ 1 2)</lisp>"]), ("x <lisp-result>(+ 1 2)</lisp-result>3", ["."]))
    text, _, mock = run_turn(script, policy=policy)
    assert text == "x <lisp-result>(+ 1 2)</lisp-result>3."
    mock.verify_complete()


def test_annotated_context_only():
    policy = SplicePolicy(context_view="annotated")
    script = MockScript.single((None, ["x <lisp>(+ 1 2)</lisp>"]), ("x <lisp-result>(+ 1 2)</lisp-result>3", ["."]))
    text, _, mock = run_turn(script, policy=policy)
    assert text == "x 3."
    mock.verify_complete()


def test_policy_validation():
    with pytest.raises(ValueError):
        SplicePolicy(client_view="both")
    with pytest.raises(ValueError):
        SplicePolicy(result_open="<lisp>")
    with pytest.raises(ValueError):
        SplicePolicy(result_open="a", result_close="a")
    with pytest.raises(ValueError):
        TurnLimits(max_rounds=5, max_evals=4)
    with pytest.raises(ValueError):
        TurnLimits(max_rounds=0)


def test_splice_text_rules():
    from replisp.lisp import EvalOutcome

    assert splice_text(EvalOutcome("ok", "1", "")) == "1"
    assert splice_text(EvalOutcome("ok", "1", "out")) == "out\n1"
    assert splice_text(EvalOutcome("ok", "", "out")) == "out"


def test_budget_override_per_turn():
    script = MockScript.single((None, ["<lisp>(while t)</lisp>"]), (None, [""]))
    limits = TurnLimits(budget=EvalBudget(max_steps=500))
    text, trace, _ = run_turn(script, limits=limits)
    assert text == "#<error: BudgetExhausted max_steps (500 steps)>"


def test_persistence_across_turns():
    store = SessionStore()
    run_turn(MockScript.single((None, ["<lisp>(defun f (x) (* x x))</lisp>"]), (None, [])), store=store)
    text, _, _ = run_turn(MockScript.single((None, ["<lisp>(f 7)</lisp>"]), (None, [])), store=store)
    assert text == "49"
    assert store.get("s").turns == 2
    assert [e.turn for e in store.get("s").journal] == [1, 2]


def test_direct_eval_shared_with_turns():
    store = SessionStore()
    orch = Orchestrator(MockBackend(MockScript.single((None, ["<lisp>(g 2)</lisp>"]), (None, []))), store)
    assert orch.direct_eval("new", "(defun g (x) (+ x 1))").ok
    text, _ = asyncio.run(orch.collect(request(), store.get("new")))
    assert text == "3"
    store.default_budget = EvalBudget(max_steps=1000)
    assert orch.direct_eval("other", "(while t)").error_kind == "BudgetExhausted"
    assert orch.direct_eval("other", "(+ 1 1)").value == "2"


def test_concurrent_turns_same_session_serialize():
    store = SessionStore()
    active, peak = [0], [0]
    real = store.evaluator.evaluate

    def tracked(*a, **kw):
        active[0] += 1
        peak[0] = max(peak[0], active[0])
        try:
            time.sleep(0.01)
            return real(*a, **kw)
        finally:
            active[0] -= 1

    store.evaluator.evaluate = tracked
    turn = [MockRound(None, ["<lisp>1</lisp>"]), MockRound(None, ["<lisp>2</lisp>"]), MockRound(None, [])]
    mock = MockBackend(MockScript([MockTurn(rounds=list(turn)), MockTurn(rounds=list(turn))]))
    orch = Orchestrator(mock, store)
    sess = store.get_or_create("c")

    async def one():
        async with store.lease(sess):
            return await orch.collect(request(), sess)

    async def main():
        return await asyncio.gather(one(), one())

    results = asyncio.run(main())
    assert [t for t, _ in results] == ["12", "12"]
    assert peak[0] == 1


class _ForeverBackend:
    """Adversarial: every stream is an endless series of code blocks."""

    prefill_supported = True

    def __init__(self):
        self.opened = 0

    async def open_stream(self, req):
        self.opened += 1

        async def gen():
            while True:
                yield TokenEvent(delta="<lisp>(+ 1 1)</lisp>")

        return BackendStream(gen())


def test_adversarial_backend_bounded():
    backend = _ForeverBackend()
    _, trace, _ = run_turn(None, backend=backend, limits=TurnLimits(4, 6))
    assert trace.status == ROUND_LIMIT
    assert trace.eval_count == 5 and backend.opened == 5


def test_trace_json_sorted():
    _, trace, _ = run_turn(MockScript.single((None, ["a<lisp>1</lisp>"]), (None, [])))
    doc = trace.to_json()
    assert '"eval_count": 1' in doc and '"status": "completed"' in doc
