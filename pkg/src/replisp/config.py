"""Service configuration: YAML file, ``REPLISP_*`` environment, CLI overrides.

Precedence is CLI > environment > file > defaults. Every key is addressed
by a dotted path (``backend.base_url``); its environment variable is the
path upper-cased with dots replaced by underscores and a ``REPLISP_``
prefix (``REPLISP_BACKEND_BASE_URL``). Errors name the key and, for file
values, the line.
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple

import yaml

from .backend import DEFAULT_PREFILL_PARAMS
from .lisp import CapabilityPolicy, EvalBudget
from .orchestrator import VIEWS, SplicePolicy, TurnLimits
from .scanner import DEFAULT_MAX_CODE_BYTES, UNTERMINATED_POLICIES

ENV_PREFIX = "REPLISP_"
LOG_LEVELS = ("debug", "info", "warning", "error")

_B = EvalBudget()

# path -> (type, default, choices)
SCHEMA: Dict[str, Tuple[Any, Any, Optional[tuple]]] = {
    "listen": (str, "127.0.0.1:8080", None),
    "log_level": (str, "info", LOG_LEVELS),
    "fixed_clock": (bool, False, None),
    "backend.kind": (str, "openai", ("openai", "mock")),
    "backend.base_url": (str, None, None),
    "backend.token_env": (str, "REPLISP_BACKEND_TOKEN", None),
    "backend.prefill_supported": (bool, True, None),
    "backend.prefill_params": (dict, DEFAULT_PREFILL_PARAMS, None),
    "backend.idle_timeout_ms": (int, 60_000, None),
    "backend.connect_retries": (int, 1, None),
    "backend.mock_script": (str, None, None),
    "evaluator.kind": (str, "embedded", ("embedded", "bridge")),
    "evaluator.bridge.command": (list, None, None),
    "evaluator.bridge.eval_timeout_ms": (int, 5000, None),
    "evaluator.bridge.restart_limit": (int, 10, None),
    "evaluator.bridge.fallback": (str, "error", ("error", "embedded")),
    "evaluator.bridge.processes": (str, "shared", ("shared", "per-session")),
    "limits.max_rounds": (int, 8, None),
    "limits.max_evals": (int, 16, None),
    "splice.client_view": (str, "replace", VIEWS),
    "splice.context_view": (str, "replace", VIEWS),
    "splice.result_open": (str, "<lisp-result>", None),
    "splice.result_close": (str, "</lisp-result>", None),
    "budget.max_steps": (int, _B.max_steps, None),
    "budget.max_depth": (int, _B.max_depth, None),
    "budget.max_cells": (int, _B.max_cells, None),
    "budget.max_output_bytes": (int, _B.max_output_bytes, None),
    "budget.max_wall_ms": (int, _B.max_wall_ms, None),
    "capabilities.filesystem": (bool, False, None),
    "capabilities.network": (bool, False, None),
    "capabilities.subprocess": (bool, False, None),
    "capabilities.time": (bool, False, None),
    "capabilities.fs_root": (str, None, None),
    "sessions.data_dir": (str, None, None),
    "sessions.max_sessions": (int, 1024, None),
    "sessions.ttl_s": (int, 86_400, None),
    "sessions.queue_depth": (int, 16, None),
    "sessions.sweep_interval_s": (int, 60, None),
    "scanner.max_code_bytes": (int, DEFAULT_MAX_CODE_BYTES, None),
    "scanner.unterminated": (str, "flush-as-text", UNTERMINATED_POLICIES),
    "shutdown.drain_s": (int, 10, None),
}

NON_NEGATIVE = {"backend.connect_retries", "evaluator.bridge.restart_limit", "sessions.ttl_s", "sessions.sweep_interval_s",
                "shutdown.drain_s"}
SECTIONS = {p.rsplit(".", 1)[0] for p in SCHEMA if "." in p} | {"evaluator.bridge"}


def env_name(path: str) -> str:
    return ENV_PREFIX + path.upper().replace(".", "_")


class ConfigError(ValueError):
    def __init__(self, message: str, where: str = ""):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


@dataclass
class ServiceConfig:
    values: Dict[str, Any]
    origin: Dict[str, str] = field(default_factory=dict)

    def __getitem__(self, path: str) -> Any:
        return self.values[path]

    def where(self, path: str) -> str:
        return self.origin.get(path, "default")

    @property
    def host_port(self) -> Tuple[str, int]:
        host, _, port = self["listen"].rpartition(":")
        return host or "127.0.0.1", int(port)

    def budget(self) -> EvalBudget:
        return EvalBudget(**{k.split(".")[1]: self[k] for k in SCHEMA if k.startswith("budget.")})

    def policy(self) -> CapabilityPolicy:
        return CapabilityPolicy(**{k.split(".")[1]: self[k] for k in SCHEMA
                                   if k.startswith("capabilities.") and k != "capabilities.fs_root"})

    def limits(self) -> TurnLimits:
        return TurnLimits(self["limits.max_rounds"], self["limits.max_evals"])

    def splice(self) -> SplicePolicy:
        return SplicePolicy(self["splice.client_view"], self["splice.context_view"],
                            self["splice.result_open"], self["splice.result_close"])

    def resolved(self) -> Dict[str, Any]:
        """Values with origins, safe to log (no secrets are config values)."""
        return {k: self.values[k] for k in sorted(self.values)}


# -- file -----------------------------------------------------------------


def _flatten_node(node, prefix: str, out: Dict[str, Tuple[Any, int]], fname: str) -> None:
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError("expected a mapping", f"{fname}:{node.start_mark.line + 1}")
    seen = set()
    for key_node, value_node in node.value:
        line = key_node.start_mark.line + 1
        key = key_node.value if isinstance(key_node, yaml.ScalarNode) else None
        if not isinstance(key, str):
            raise ConfigError("keys must be strings", f"{fname}:{line}")
        path = f"{prefix}{key}"
        if path in seen:
            raise ConfigError(f"duplicate key {path}", f"{fname}:{line}")
        seen.add(path)
        if path in SCHEMA:
            value = yaml.safe_load(yaml.serialize(value_node))
            out[path] = (value, value_node.start_mark.line + 1)
        elif path in SECTIONS:
            _flatten_node(value_node, path + ".", out, fname)
        else:
            raise ConfigError(f"unknown key {path}", f"{fname}:{line}")


def parse_file(text: str, fname: str = "<config>") -> Dict[str, Tuple[Any, int]]:
    """Map dotted paths to ``(value, line)``."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 0
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', None) or exc}", f"{fname}:{line}") from None
    out: Dict[str, Tuple[Any, int]] = {}
    if root is not None:
        _flatten_node(root, "", out, fname)
    return out


# -- validation --------------------------------------------------------------


def _coerce(path: str, value: Any, where: str) -> Any:
    typ, _, choices = SCHEMA[path]
    if value is None:
        return None
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}", where)
        if value < 0 or (value == 0 and path not in NON_NEGATIVE):
            raise ConfigError(f"{path} must be {'non-negative' if path in NON_NEGATIVE else 'positive'}", where)
    elif typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false, got {value!r}", where)
    elif typ is str:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = str(value)
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string", where)
    elif typ is list:
        if isinstance(value, str):
            value = shlex.split(value)
        if not isinstance(value, list) or not value or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{path} must be a non-empty list of strings", where)
    elif typ is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be a mapping", where)
    if choices and value not in choices:
        raise ConfigError(f"{path} must be one of {', '.join(choices)}, got {value!r}", where)
    return value


def load_config(
    path: Optional[str] = None,
    *,
    text: Optional[str] = None,
    env: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ServiceConfig:
    """Resolve configuration; raises :class:`ConfigError` with a precise location."""
    values = {p: spec[1] for p, spec in SCHEMA.items()}
    origin: Dict[str, str] = {}
    fname = path or "<config>"
    if path is not None and text is None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc.strerror}", path) from None
    if text is not None:
        for key, (value, line) in parse_file(text, fname).items():
            where = f"{fname}:{line}"
            values[key] = _coerce(key, value, where)
            origin[key] = where
    env = env if env is not None else {}
    for key in SCHEMA:
        name = env_name(key)
        if name in env:
            where = f"environment {name}"
            try:
                raw = yaml.safe_load(env[name]) if env[name] != "" else None
            except yaml.YAMLError:
                raw = env[name]
            if SCHEMA[key][0] is str and raw is not None and not isinstance(raw, str):
                raw = env[name]
            values[key] = _coerce(key, raw, where)
            origin[key] = where
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key}", "command line")
        values[key] = _coerce(key, value, "command line")
        origin[key] = "command line"
    cfg = ServiceConfig(values, origin)
    _cross_check(cfg)
    return cfg


def _cross_check(cfg: ServiceConfig) -> None:
    def fail(key: str, message: str):
        raise ConfigError(message, cfg.where(key))

    listen = cfg["listen"]
    host, sep, port = listen.rpartition(":")
    if not sep or not port.isdigit() or not 0 < int(port) < 65536:
        fail("listen", f"listen must be host:port, got {listen!r}")
    if cfg["backend.kind"] == "openai" and not cfg["backend.base_url"]:
        fail("backend.base_url", "backend.base_url is required when backend.kind is openai")
    if cfg["backend.kind"] == "mock" and not cfg["backend.mock_script"]:
        fail("backend.mock_script", "backend.mock_script is required when backend.kind is mock")
    if cfg["evaluator.kind"] == "bridge" and not cfg["evaluator.bridge.command"]:
        fail("evaluator.bridge.command", "evaluator.bridge.command is required when evaluator.kind is bridge")
    try:
        cfg.limits()
    except ValueError as exc:
        fail("limits.max_evals", f"limits: {exc}")
    try:
        cfg.splice()
    except ValueError as exc:
        fail("splice.result_open", f"splice: {exc}")
