"""Command line entry point.

Exit codes: 0 success, 1 usage or config error, 2 scenario assertion
failure, 3 runtime failure.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from . import journal
from .backend import MockScript, ScriptError
from .clock import SYSTEM_CLOCK, FixedClock
from .config import ConfigError, load_config
from .lisp import EvalBudget, LispError, ReaderError, macroexpand, print_value, read
from .orchestrator import SplicePolicy, TurnLimits
from .sessions import InvalidSessionId, SessionError, SessionStore, validate_session_id

EXIT_OK, EXIT_USAGE, EXIT_ASSERTION, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("replisp.cli")


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


class _Group(click.Group):
    def main(self, *args, **kwargs):
        # click's usage errors exit 2; ours are 1
        try:
            return super().main(*args, standalone_mode=False, **kwargs)
        except click.exceptions.Abort:
            click.echo("aborted", err=True)
            sys.exit(EXIT_USAGE)
        except click.ClickException as exc:
            exc.show()
            sys.exit(EXIT_USAGE)
        except click.exceptions.Exit as exc:
            sys.exit(exc.exit_code)


@click.group(cls=_Group)
@click.version_option(package_name="artifact", prog_name="replisp")
def main():
    """Lisp-in-the-loop gateway for streaming language models."""


# -- serve --------------------------------------------------------------------


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML config file.")
@click.option("--listen", help="host:port to bind.")
@click.option("--backend", help="Backend base URL (OpenAI compatible).")
@click.option("--mock-script", type=click.Path(dir_okay=False), help="Serve a scripted mock backend instead.")
@click.option("--data-dir", type=click.Path(file_okay=False), help="Session persistence directory.")
@click.option("--log-level", type=click.Choice(["debug", "info", "warning", "error"]))
@click.option("--fixed-clock", is_flag=True, default=None, help="Pin all timestamps.")
def serve(config_path, listen, backend, mock_script, data_dir, log_level, fixed_clock):
    """Run the HTTP service."""
    from .logs import setup_logging
    from .service import build_gateway, create_app

    overrides = {
        "listen": listen,
        "backend.base_url": backend,
        "sessions.data_dir": data_dir,
        "log_level": log_level,
        "fixed_clock": fixed_clock,
    }
    if mock_script:
        overrides.update({"backend.kind": "mock", "backend.mock_script": mock_script})
    try:
        cfg = load_config(config_path, env=os.environ, overrides=overrides)
        gw = build_gateway(cfg)
    except ConfigError as exc:
        _fail(EXIT_USAGE, f"invalid config: {exc}")
    except (OSError, ScriptError, ValueError) as exc:
        _fail(EXIT_USAGE, f"invalid config: {exc}")
    setup_logging(cfg["log_level"])
    host, port = cfg.host_port
    log.info("listening", extra={"listen": f"{host}:{port}", "settings": cfg.resolved()})
    import uvicorn

    try:
        uvicorn.run(create_app(gw), host=host, port=port, log_level=cfg["log_level"],
                    timeout_graceful_shutdown=cfg["shutdown.drain_s"])
    except Exception as exc:
        _fail(EXIT_RUNTIME, str(exc))


# -- repl -----------------------------------------------------------------------


def _incomplete(text: str) -> bool:
    try:
        read(text)
    except ReaderError as exc:
        return "missing ')'" in exc.message or "unterminated" in exc.message
    return False


def _store(data_dir, **kw) -> SessionStore:
    return SessionStore(data_dir, **kw)


@main.command()
@click.option("--session", "session_id", help="Persistent session id (requires --data-dir).")
@click.option("--data-dir", type=click.Path(file_okay=False), envvar="REPLISP_SESSIONS_DATA_DIR")
@click.option("--budget-steps", type=click.IntRange(min=1), help="Step budget per evaluation.")
def repl(session_id, data_dir, budget_steps):
    """Interactive read-eval-print loop on the embedded interpreter."""
    budget = EvalBudget()
    if budget_steps:
        budget = EvalBudget(**dict(budget.to_dict(), max_steps=budget_steps))
    if session_id is not None and not data_dir:
        _fail(EXIT_USAGE, "--session needs --data-dir (or REPLISP_SESSIONS_DATA_DIR)")
    store = _store(data_dir if session_id else None, default_budget=budget)
    try:
        session = store.get_or_create(session_id) if session_id else store.create_ephemeral()
    except SessionError as exc:
        _fail(EXIT_RUNTIME, str(exc))
    session.budget = budget
    interactive = sys.stdin.isatty()
    buf = ""
    while True:
        try:
            line = input(("* " if not buf else "  ") if interactive else "")
        except EOFError:
            break
        if not buf:
            stripped = line.strip()
            if stripped in (":quit", ":q"):
                break
            if stripped == ":defs":
                line = "(list-definitions)"
            elif stripped.startswith(":expand"):
                _expand(session, stripped[len(":expand"):])
                continue
            elif stripped.startswith(":"):
                click.echo(f"unknown command {stripped.split()[0]}; try :quit, :expand <form>, :defs")
                continue
        buf = f"{buf}\n{line}" if buf else line
        if _incomplete(buf):
            continue
        source, buf = buf, ""
        if not source.strip():
            continue
        outcome = store.eval_in_session(session, source)
        if outcome.output:
            click.echo(outcome.output, nl=not outcome.output.endswith("\n"))
        click.echo(outcome.result_text())
    store.shutdown()


def _expand(session, text: str) -> None:
    try:
        forms = read(text)
        if len(forms) != 1:
            click.echo(":expand takes exactly one form")
            return
        click.echo(print_value(macroexpand(forms[0], session.env, session.budget)))
    except LispError as exc:
        click.echo(f"#<error: {exc.kind} {exc.message}>")


# -- run-transcript -------------------------------------------------------------


@main.command("run-transcript")
@click.option("--script", "script_path", required=True, type=click.Path(dir_okay=False))
@click.option("--json-trace", type=click.Path(dir_okay=False), help="Write the turn traces as JSON.")
@click.option("--fixed-clock", is_flag=True, help="Pin timestamps for reproducible traces.")
@click.option("--data-dir", type=click.Path(file_okay=False), help="Persist sessions here.")
@click.option("--max-rounds", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--max-evals", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--context-view", type=click.Choice(["replace", "annotated"]), default="replace", show_default=True)
def run_transcript(script_path, json_trace, fixed_clock, data_dir, max_rounds, max_evals, context_view):
    """Replay a mock-backend script through the full loop."""
    from .transcript import run_script_sync

    try:
        script = MockScript.load(script_path)
        limits = TurnLimits(max_rounds, max_evals)
    except OSError as exc:
        _fail(EXIT_USAGE, f"cannot read script: {exc.strerror}")
    except (ScriptError, ValueError) as exc:
        _fail(EXIT_USAGE, f"{script_path}: {exc}")
    clock = FixedClock() if fixed_clock else SYSTEM_CLOCK
    store = SessionStore(data_dir, clock=clock)
    try:
        result = run_script_sync(script, store, limits=limits, policy=SplicePolicy(context_view=context_view), clock=clock)
    except SessionError as exc:
        _fail(EXIT_RUNTIME, str(exc))
    except Exception as exc:  # noqa: BLE001 - report, do not crash with a traceback
        _fail(EXIT_RUNTIME, f"{exc.__class__.__name__}: {exc}")
    finally:
        store.shutdown()
    sys.stdout.write(result.stdout)
    sys.stdout.flush()
    if json_trace:
        Path(json_trace).write_text(result.trace_json(), encoding="utf-8")
    if not result.ok:
        _fail(EXIT_ASSERTION, result.failure)


# -- session admin ----------------------------------------------------------------


@main.group()
def session():
    """Administer persisted session journals."""


_data_dir = click.option("--data-dir", required=True, type=click.Path(file_okay=False), envvar="REPLISP_SESSIONS_DATA_DIR")


def _checked_id(session_id: str) -> str:
    try:
        return validate_session_id(session_id)
    except InvalidSessionId as exc:
        _fail(EXIT_USAGE, str(exc))


@session.command("ls")
@_data_dir
@click.option("--json", "as_json", is_flag=True)
def session_ls(data_dir, as_json):
    items = SessionStore(data_dir).list_sessions()
    if as_json:
        click.echo(json.dumps(items, sort_keys=True))
        return
    for item in items:
        extra = f"  error: {item['error']}" if "error" in item else ""
        click.echo(f"{item['id']}\tevals={item.get('eval_count', '?')}\tjournal={item.get('journal_length', '?')}{extra}")


@session.command("rm")
@_data_dir
@click.argument("session_id")
def session_rm(data_dir, session_id):
    if not SessionStore(data_dir).delete(_checked_id(session_id)):
        _fail(EXIT_RUNTIME, f"no session {session_id}")
    click.echo(f"removed {session_id}")


@session.command("export")
@_data_dir
@click.argument("session_id")
@click.option("-o", "--output", type=click.Path(dir_okay=False), help="Destination file (default stdout).")
def session_export(data_dir, session_id, output):
    store = SessionStore(data_dir)
    path = store.journal_path(_checked_id(session_id))
    try:
        data = path.read_bytes()
        journal.decode(data)
    except FileNotFoundError:
        _fail(EXIT_RUNTIME, f"no session {session_id}")
    except journal.JournalFormatError as exc:
        _fail(EXIT_RUNTIME, f"{path}: {exc}")
    if output:
        journal.write_atomic(Path(output), data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()


@session.command("import")
@_data_dir
@click.argument("session_id")
@click.argument("source", type=click.Path(dir_okay=False, exists=True))
def session_import(data_dir, session_id, source):
    store = SessionStore(data_dir)
    try:
        sess = store.import_journal(_checked_id(session_id), Path(source).read_bytes())
    except journal.JournalFormatError as exc:
        _fail(EXIT_RUNTIME, f"{source}: {exc}")
    except SessionError as exc:
        _fail(EXIT_RUNTIME, str(exc))
    click.echo(f"imported {session_id} ({len(sess.journal)} entries)")


if __name__ == "__main__":
    main()
