"""Run configuration: flat ``key=value`` text with environment and flag overrides.

Precedence, highest first: command-line flags, ``TKGW_<KEY>`` environment
variables, the config file, built-in defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

from .env import SemanticMode
from .errors import ConfigError
from .evaluator import AbsentRule
from .kg import KNOWN_DATASETS
from .policy import GateMode, PolicyConfig, Variant
from .trainer import TrainConfig

ENV_PREFIX = "TKGW_"


@dataclass(frozen=True)
class RunConfig:
    data: str = ""
    out: str = ""
    variant: str = Variant.FULL.value
    # empty means derived from the variant
    semantic_mode: str = ""
    dim: int = 100
    hidden: int = 100
    gate: str = GateMode.PER_CANDIDATE.value
    # recorded for parity with published settings; Δt enters the encoder as a scalar, so nothing reads it
    timestamp_dim: int = 100
    max_dt: int = 400
    horizon: int = 3
    # 0 means the dataset default (90 on WIKI, 100 elsewhere)
    max_actions: int = 0
    batch_size: int = 512
    lr: float = 0.001
    gamma: float = 0.95
    epochs: int = 50
    rollouts: int = 1
    baseline: bool = True
    baseline_decay: float = 0.9
    entropy_coef: float = 0.0
    grad_clip: float = 5.0
    entity_dropout: float = 0.05
    patience: int = 5
    beam_width: int = 100
    aggregate: str = "sum"
    absent_rule: str = AbsentRule.OPTIMISTIC.value
    seed: int = 0

    def __post_init__(self):
        try:
            Variant(self.variant)
            GateMode(self.gate)
            AbsentRule(self.absent_rule)
            if self.semantic_mode:
                SemanticMode(self.semantic_mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.aggregate not in ("sum", "max"):
            raise ConfigError(f"aggregate must be sum or max, got {self.aggregate!r}")
        if (self.variant == Variant.NO_SEMANTIC_EDGES.value and self.semantic_mode
                and self.semantic_mode != SemanticMode.OFF.value):
            raise ConfigError("variant no-semantic-edges requires semantic_mode=off")
        if self.max_actions < 0:
            raise ConfigError("max_actions must be >= 0")
        try:
            self.train_config()
            self.policy_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def resolved_semantic_mode(self) -> str:
        if self.semantic_mode:
            return self.semantic_mode
        if self.variant == Variant.NO_SEMANTIC_EDGES.value:
            return SemanticMode.OFF.value
        return SemanticMode.UNSEEN_ONLY.value

    def resolved_max_actions(self, dataset: str = "") -> int:
        if self.max_actions:
            return self.max_actions
        known = KNOWN_DATASETS.get(dataset.upper())
        return known.max_actions if known else 100

    def train_config(self, dataset: str = "") -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        kw["max_actions"] = self.resolved_max_actions(dataset)
        return TrainConfig(**kw)

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(self.dim, self.hidden, Variant(self.variant), GateMode(self.gate), self.max_dt)

    def to_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in dataclasses.asdict(self).items())

    def replace(self, **changes) -> "RunConfig":
        return build_config(changes, base=self)


_FIELDS = {f.name: f for f in fields(RunConfig)}
KEYS = tuple(_FIELDS)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key: str, raw, origin: str):
    default = _FIELDS[key].default
    if not isinstance(raw, str):
        raw_value = raw
        if isinstance(default, bool) and isinstance(raw_value, bool):
            return raw_value
        if isinstance(default, (int, float)) and not isinstance(default, bool) and isinstance(raw_value, (int, float)):
            return type(default)(raw_value)
        raw = str(raw)
    value = raw.strip()
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{origin}: bad value for {key}: {raw!r}") from None
    return value


def parse_pairs(lines, origin: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {line!r}")
        key = key.strip().replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_pairs(path.read_text(encoding="utf-8").splitlines(), str(path))


def env_overrides(environ: Mapping[str, str]) -> dict[str, str]:
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in _FIELDS:
            raise ConfigError(f"unknown environment override {name}")
        out[key] = value
    return out


def build_config(cli: Mapping[str, object] | None = None, environ: Mapping[str, str] | None = None,
                 path=None, base: RunConfig | None = None) -> RunConfig:
    """Merge the layers and validate before anything runs."""
    layers = [("file", read_config_file(path) if path else {}),
              ("environment", env_overrides(environ or {})),
              ("command line", dict(cli or {}))]
    values = dataclasses.asdict(base) if base is not None else {}
    for origin, layer in layers:
        for key, raw in layer.items():
            key = key.replace("-", "_")
            if key not in _FIELDS:
                raise ConfigError(f"{origin}: unknown key {key!r}")
            values[key] = _coerce(key, raw, origin)
    return RunConfig(**values)
