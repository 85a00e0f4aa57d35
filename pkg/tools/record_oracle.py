"""Record oracle outputs for the curated corpus from an external Common Lisp.

    python tools/record_oracle.py --command "sbcl --noinform --no-userinit"
    python tools/record_oracle.py --command "node path/to/jscl-node.js"

Each entry of tools/oracle_forms.txt runs in its own package through the
repl bridge (so the REPLISP-COMPAT prelude supplies STRING-APPEND,
STRING-LENGTH and WHILE). The recorded value/output pairs are written to
tests/data/oracle_corpus.json together with the oracle's identity. The
embedded interpreter is then compared against them and differences are
listed; entries the oracle could not evaluate are dropped, never patched.
"""

from __future__ import annotations

import argparse
import json
import shlex
import subprocess
import sys
from pathlib import Path

from replisp.bridge import Bridge, BridgeConfig
from replisp.lisp import Env, eval_top_level

ROOT = Path(__file__).resolve().parent.parent
FORMS = ROOT / "tools" / "oracle_forms.txt"
OUT = ROOT / "tests" / "data" / "oracle_corpus.json"


def load_forms(path: Path = FORMS):
    entries = []
    text = "\n".join(line for line in path.read_text(encoding="utf-8").splitlines() if not line.startswith(";;"))
    for chunk in text.split("\n----\n"):
        lines = chunk.strip("\n").splitlines()
        if not lines:
            continue
        if not lines[0].startswith("# "):
            raise SystemExit(f"entry without category: {chunk[:40]!r}")
        entries.append((lines[0][2:].strip(), "\n".join(lines[1:])))
    return entries


def oracle_version(command) -> str:
    try:
        out = subprocess.run(list(command) + ["--version"], capture_output=True, text=True, timeout=20, input="")
        return (out.stdout or out.stderr).strip().splitlines()[0][:80]
    except (OSError, IndexError, subprocess.TimeoutExpired):
        return "unknown"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--command", required=True, help="external Lisp command line")
    ap.add_argument("--name", help="oracle name recorded in the corpus (default: the executable)")
    ap.add_argument("--oracle-version", help="version string recorded in the corpus (default: <cmd> --version)")
    ap.add_argument("--timeout-ms", type=int, default=20000)
    ap.add_argument("--output", type=Path, default=OUT)
    args = ap.parse_args(argv)

    command = shlex.split(args.command)
    bridge = Bridge(BridgeConfig(command, eval_timeout_ms=args.timeout_ms))
    bridge.start()
    records, dropped, mismatches = [], [], []
    try:
        for i, (category, source) in enumerate(load_forms()):
            outcome = bridge.eval_remote(f"oracle-{i}", source)
            if not outcome.ok:
                dropped.append((i, source, outcome.error["message"]))
                continue
            records.append({"id": i, "category": category, "source": source,
                            "value": outcome.value, "output": outcome.output})
            mine = eval_top_level(source, Env())
            if (mine.value, mine.output) != (outcome.value, outcome.output):
                mismatches.append((i, source, (outcome.value, outcome.output), (mine.result_text(), mine.output)))
    finally:
        bridge.shutdown()

    doc = {
        "oracle": {"name": args.name or Path(command[-1]).name, "version": args.oracle_version or oracle_version(command[:1]),
                   "prelude": "replisp.assets/compat_prelude.lisp"},
        "entries": records,
    }
    args.output.write_text(json.dumps(doc, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    print(f"recorded {len(records)} entries to {args.output}")
    for i, source, err in dropped:
        print(f"dropped {i}: oracle error {err!r}: {source!r}", file=sys.stderr)
    for i, source, theirs, mine in mismatches:
        print(f"MISMATCH {i}: {source!r}\n  oracle   {theirs!r}\n  embedded {mine!r}", file=sys.stderr)
    return 1 if mismatches else 0


if __name__ == "__main__":
    sys.exit(main())
