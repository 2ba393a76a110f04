"""Application config: JSON file, environment, then command-line flags.

Config files are JSON with a ``schema_version``; unknown keys are rejected so a
misspelt option never silently falls back to its default::

    {
      "schema_version": 1,
      "backend": {"kind": "http", "endpoint": "http://localhost:8000", "model": "r1-7b"},
      "controller": {"mode": "deer", "lam": 0.95, "monitor": {"strategy": "marker"}},
      "run": {"workers": 4, "rounds": 1},
      "log_level": "INFO"
    }

A run file written by ``deer run`` can also serve as a config file: its
header line carries the resolved config in this schema.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from .controller import ConfigError, ControllerConfig
from .monitor import MonitorConfig, MonitorError

SCHEMA_VERSION = 1

ENV_VARS = {
    "DEER_ENDPOINT": ("backend", "endpoint"),
    "DEER_MODEL": ("backend", "model"),
    "DEER_API_KEY": ("backend", "api_key"),
    "DEER_SCRIPT": ("backend", "script"),
    "DEER_LOG_LEVEL": (None, "log_level"),
}


@dataclass
class BackendSettings:
    kind: str = "http"  # "http" | "scripted"
    endpoint: Optional[str] = None
    model: Optional[str] = None
    api_key: Optional[str] = None
    script: Optional[str] = None
    timeout: float = 600.0
    stream: bool = True
    max_concurrency: int = 8

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        # Never echo secrets into output artifacts.
        d["api_key"] = None
        return d


@dataclass
class RunSettings:
    workers: int = 1
    rounds: int = 1


@dataclass
class AppConfig:
    backend: BackendSettings = field(default_factory=BackendSettings)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    run: RunSettings = field(default_factory=RunSettings)
    log_level: str = "WARNING"

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "backend": self.backend.to_json(),
            "controller": self.controller.to_json(),
            "run": dataclasses.asdict(self.run),
            "log_level": self.log_level,
        }

    def validate(self):
        if self.backend.kind not in ("http", "scripted"):
            raise ConfigError(f"backend.kind: must be 'http' or 'scripted', got {self.backend.kind!r}")
        if self.backend.kind == "http" and not (self.backend.endpoint and self.backend.model):
            raise ConfigError("backend.endpoint/backend.model: required for the http backend "
                              "(flag, DEER_ENDPOINT/DEER_MODEL, or config file)")
        if self.backend.kind == "scripted" and not self.backend.script:
            raise ConfigError("backend.script: required for the scripted backend")
        if self.run.workers < 1:
            raise ConfigError("run.workers: must be >= 1")
        if self.run.rounds < 1:
            raise ConfigError("run.rounds: must be >= 1")
        self.controller.validate()


def _build(cls, data: Mapping[str, Any], path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown config key")
    return data


def _merge_section(obj, data: Mapping[str, Any], path: str):
    _build(type(obj), data, path)
    for k, v in data.items():
        if k == "monitor" and isinstance(obj, ControllerConfig):
            _build(MonitorConfig, v, f"{path}.monitor")
            try:
                v = dataclasses.replace(obj.monitor, **v)
            except MonitorError as exc:
                raise ConfigError(f"{path}.monitor: {exc}") from None
        setattr(obj, k, v)


def from_dict(data: Mapping[str, Any], base: Optional[AppConfig] = None) -> AppConfig:
    cfg = base or AppConfig()
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported version {version!r}")
    top = {"schema_version", "backend", "controller", "run", "log_level"}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown config key")
    if "backend" in data:
        _merge_section(cfg.backend, data["backend"], "backend")
    if "controller" in data:
        _merge_section(cfg.controller, data["controller"], "controller")
    if "run" in data:
        _merge_section(cfg.run, data["run"], "run")
    if "log_level" in data:
        cfg.log_level = data["log_level"]
    return cfg


def load_config_file(path) -> dict:
    """Read a JSON config, or the header of a ``deer run`` output file."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    first = text.splitlines()[0] if text else ""
    try:
        head = json.loads(first)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON ({exc})") from None
    if head.get("type") != "header" or "config" not in head:
        raise ConfigError(f"config: {path} has no run header")
    return head["config"]


def apply_env(cfg: AppConfig, env: Mapping[str, str]) -> AppConfig:
    for var, (section, key) in ENV_VARS.items():
        if env.get(var):
            setattr(getattr(cfg, section) if section else cfg, key, env[var])
    return cfg


def resolve(config_path: Optional[str], overrides: Mapping[str, Any], env: Optional[Mapping[str, str]] = None) -> AppConfig:
    """Defaults < config file < environment < flags.

    ``overrides`` maps dotted keys (``controller.lam``) to flag values; None
    means the flag was not given.
    """
    cfg = AppConfig()
    if config_path:
        cfg = from_dict(load_config_file(config_path), cfg)
    apply_env(cfg, os.environ if env is None else env)
    monitor_over = {}
    for key, val in overrides.items():
        if val is None:
            continue
        section, _, name = key.partition(".")
        if section == "monitor":
            monitor_over[name] = val
        elif name:
            setattr(getattr(cfg, section), name, val)
        else:
            setattr(cfg, section, val)
    if monitor_over:
        try:
            cfg.controller.monitor = dataclasses.replace(cfg.controller.monitor, **monitor_over)
        except MonitorError as exc:
            raise ConfigError(f"monitor: {exc}") from None
    return cfg
