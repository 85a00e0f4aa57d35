import os
import shlex
import shutil
import subprocess
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
DATA = Path(__file__).resolve().parent / "data"


def _npm_jscl():
    npm = shutil.which("npm")
    node = shutil.which("node")
    if not (npm and node):
        return None
    try:
        root = subprocess.run([npm, "root", "-g"], capture_output=True, text=True, timeout=20).stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        return None
    js = Path(root) / "jscl" / "dist" / "jscl-node.js"
    return [node, str(js)] if js.exists() else None


def find_external_lisp():
    """Command line of an external Common Lisp, or None.

    $REPLISP_TEST_LISP wins, then sbcl on PATH, then a global npm JSCL.
    """
    env = os.environ.get("REPLISP_TEST_LISP")
    if env:
        return shlex.split(env)
    sbcl = shutil.which("sbcl")
    if sbcl:
        return [sbcl, "--noinform", "--no-userinit", "--no-sysinit"]
    return _npm_jscl()


_LISP = find_external_lisp()


@pytest.fixture(scope="session")
def external_lisp():
    if _LISP is None:
        pytest.skip("no external Common Lisp available")
    return _LISP


@pytest.fixture
def data_dir(tmp_path):
    return tmp_path / "data"


# PASS/FAIL lines from test_acceptance, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
