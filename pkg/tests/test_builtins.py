import pytest

from replisp.lisp import CapabilityPolicy, Env, builtin_library, eval_top_level

from builtin_audit import FORBIDDEN, GATED_BUILTINS, PURE_BUILTINS, audit


def value(src, env=None):
    out = eval_top_level(src, env or Env())
    assert out.ok, out.error
    return out.value


def test_default_table_is_exactly_pure_set():
    assert audit(builtin_library()) == ([], [])
    assert audit(Env().functions) == ([], [])


@pytest.mark.parametrize("group", sorted(GATED_BUILTINS))
def test_each_flag_adds_only_its_group(group):
    names = {s.name for s in builtin_library(CapabilityPolicy(**{group: True}))}
    assert names == PURE_BUILTINS | GATED_BUILTINS[group]


@pytest.mark.parametrize("name", sorted(set(FORBIDDEN) | set().union(*GATED_BUILTINS.values())))
def test_forbidden_names_unbound(name):
    out = eval_top_level(f'({name} "/etc/passwd")', Env())
    assert out.error_kind == "UnboundFunction"


def test_open_passwd_message():
    out = eval_top_level('(open "/etc/passwd")', Env())
    assert out.result_text() == "#<error: UnboundFunction undefined function OPEN>"


def test_funcall_cannot_reach_gated():
    out = eval_top_level("(funcall (intern \"READ-FILE\") \"x\")", Env())
    assert out.error_kind == "UnboundFunction"


def test_filesystem_confined_to_root(tmp_path):
    env = Env(CapabilityPolicy(filesystem=True), fs_root=str(tmp_path))
    assert value('(write-file "a.txt" "hello")', env)
    assert value('(read-file "a.txt")', env) == '"hello"'
    assert (tmp_path / "a.txt").read_text() == "hello"
    assert eval_top_level('(read-file "../../etc/passwd")', env).error_kind == "CapabilityError"


def test_time_group():
    env = Env(CapabilityPolicy(time=True))
    assert int(value("(get-universal-time)", env)) > 0


@pytest.mark.parametrize("src, expected", [
    ("(list (+) (*) (- 5) (/ 8 2) (mod -7 3) (abs -4) (min 3 1 2) (max 3 1 2))", "(0 1 -5 4 2 4 1 3)"),
    ("(/ 7 2)", "3.5"),
    ("(list (< 1 2 3) (<= 2 2) (> 1 2) (>= 3 3) (= 1 1.0) (/= 1 2))", "(T T NIL T T T)"),
    ("(list (eq 'a 'a) (eql 1 1) (equal '(1 (2)) '(1 (2))) (equal \"a\" \"a\"))", "(T T T T)"),
    ("(list (cons 1 2) (car '(1 2)) (cdr '(1 2)) (append '(1) '(2) nil '(3)) (length '(a b)) (reverse '(1 2 3)))",
     "((1 . 2) 1 (2) (1 2 3) 2 (3 2 1))"),
    ("(list (nth 1 '(a b)) (nth 5 '(a)) (null nil) (not 1) (atom 1) (consp nil))", "(B NIL T NIL T NIL)"),
    ("(list (symbolp 'a) (stringp \"a\") (numberp 1.5) (functionp #'car))", "(T T T T)"),
    ("(list (reduce #'+ '(1 2 3)) (assoc 'b '((a . 1) (b . 2))) (member 2 '(1 2 3)))", "(6 (B . 2) (2 3))"),
    ("(list (string= \"ab\" \"ab\") (string-append \"a\" \"b\" \"c\") (subseq \"hello\" 1 3) (string-length \"héllo\"))",
     "(T \"abc\" \"el\" 5)"),
    ("(list (symbol-name 'foo) (intern \"BAR\"))", "(\"FOO\" BAR)"),
    ("(length \"abc\")", "3"),
])
def test_pure_behaviour(src, expected):
    assert value(src) == expected


def test_output_builtins_capture_only(capsys):
    out = eval_top_level('(princ "a") (print "b") (terpri)', Env())
    assert out.output == 'a\n"b" \n'
    assert capsys.readouterr().out == ""
