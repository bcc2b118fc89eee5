"""Operator configuration: a plain-text key-value file with environment
overrides for secrets and flag overrides on top.

    # channels
    cloud.kind = cloud_http          # cloud_http | scripted
    cloud.endpoint = https://api.example.com/v1
    cloud.model = big-planner
    cloud.temperature = 0.8
    local.kind = local_http          # local_http | scripted
    local.endpoint = http://127.0.0.1:11434
    local.model = small-extractor
    local.temperature = 0.2
    local.context = 32768
    # pipeline knobs
    rounds = 5
    threshold = 0.80
    max_iters = 5
    synthetic_cases_per_subtask = 10
    min_synthetic_cases = 1
    validation_repeats = 1
    workers = 1
    templates_dir = /path/to/templates

Secrets never live in the file: the cloud API key comes from
ORCH_CLOUD_API_KEY, and ORCH_CONFIG names the config file when the CLI
flag is absent. Scripted channels replace endpoint/model with
`<channel>.session = <recorded session file>`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .gateway import KIND_CLOUD_HTTP, KIND_LOCAL_HTTP, KIND_SCRIPTED, BackendProfile

CONFIG_ENV = "ORCH_CONFIG"

_PROFILE_KEYS = ("kind", "endpoint", "model", "temperature", "context", "session")


@dataclass
class ProfileConfig:
    kind: str | None = None
    endpoint: str | None = None
    model: str | None = None
    temperature: float | None = None
    context: int | None = None
    session: str | None = None

    def configured(self) -> bool:
        return self.kind is not None

    def to_profile(self, channel: str) -> BackendProfile:
        if self.kind == KIND_SCRIPTED:
            if not self.session:
                raise ValueError(f"config: {channel}.session required for scripted kind")
            return BackendProfile.scripted(
                session=self.session, model=self.model or "scripted",
                temperature=self.temperature if self.temperature is not None
                else (0.8 if channel == "cloud" else 0.2),
                context=self.context or 32768)
        if self.kind == KIND_CLOUD_HTTP:
            if not self.endpoint:
                raise ValueError(f"config: {channel}.endpoint required for cloud_http")
            return BackendProfile.cloud(
                self.endpoint, self.model or "",
                temperature=0.8 if self.temperature is None else self.temperature,
                context=self.context or 32768)
        if self.kind == KIND_LOCAL_HTTP:
            if not self.endpoint:
                raise ValueError(f"config: {channel}.endpoint required for local_http")
            return BackendProfile.local(
                self.endpoint, self.model or "",
                temperature=0.2 if self.temperature is None else self.temperature,
                context=self.context or 32768)
        raise ValueError(f"config: {channel}.kind is not configured")


@dataclass
class Config:
    cloud: ProfileConfig = field(default_factory=ProfileConfig)
    local: ProfileConfig = field(default_factory=ProfileConfig)
    rounds: int = 5
    threshold: float = 0.80
    max_iters: int = 5
    synthetic_cases_per_subtask: int = 10
    min_synthetic_cases: int = 1
    validation_repeats: int = 1
    workers: int = 1
    templates_dir: str | None = None

    def __post_init__(self):
        if not (0.0 < self.threshold <= 1.0):
            raise ValueError(f"config: threshold must be in (0, 1], got {self.threshold}")
        if self.rounds < 1:
            raise ValueError(f"config: rounds must be >= 1, got {self.rounds}")
        if self.max_iters < 1:
            raise ValueError(f"config: max_iters must be >= 1, got {self.max_iters}")
        if self.workers < 1:
            raise ValueError(f"config: workers must be >= 1, got {self.workers}")
        if self.validation_repeats < 1:
            raise ValueError(
                f"config: validation_repeats must be >= 1, got {self.validation_repeats}")


def parse_config(text: str) -> Config:
    config = Config()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0].strip()
        _apply(config, key, value, lineno)
    # Re-run invariant checks after all assignments.
    Config.__post_init__(config)
    return config


def _apply(config: Config, key: str, value: str, lineno: int) -> None:
    if "." in key:
        channel, _, attr = key.partition(".")
        if channel not in ("cloud", "local") or attr not in _PROFILE_KEYS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        profile = getattr(config, channel)
        if attr == "temperature":
            setattr(profile, attr, float(value))
        elif attr == "context":
            setattr(profile, attr, int(value))
        else:
            setattr(profile, attr, value)
        return
    if key in ("rounds", "max_iters", "synthetic_cases_per_subtask",
               "min_synthetic_cases", "validation_repeats", "workers"):
        setattr(config, key, int(value))
    elif key == "threshold":
        config.threshold = float(value)
    elif key == "templates_dir":
        config.templates_dir = value
    else:
        raise ValueError(f"config line {lineno}: unknown key {key!r}")


def load_config(path: str | Path | None = None) -> Config:
    """Load from the given path, else $ORCH_CONFIG, else built-in defaults."""
    if path is None:
        env = os.environ.get(CONFIG_ENV)
        if not env:
            return Config()
        path = env
    return parse_config(Path(path).read_text(encoding="utf-8"))
