"""Run configuration: one flat JSON file with dotted keys, flags on top.

Nested objects are flattened, so ``{"grounding": {"expand_fraction": 0.2}}``
and ``{"grounding.expand_fraction": 0.2}`` mean the same thing.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

ENV_VAR = "SOPBENCH_CONFIG"
BUNDLED_RULES = ("aitw", "aia_medical")


class ConfigError(ValueError):
    pass


# key -> (type, default)
KEYS: dict[str, tuple[type, Any]] = {
    "paths.input": (str, None),
    "paths.output": (str, None),
    "paths.rules": (str, "aitw"),
    "paths.golden": (str, None),
    "grounding.expand_fraction": (float, 0.10),
    "grounding.click_threshold": (float, 0.04),
    "grounding.max_fallback_distance": (float, 0.15),
    "variant": (str, "base"),
    "mix": (bool, False),
    "max_history": (int, None),
    "match.click_mode": (str, "exact_element"),
    "match.text_norm": (bool, True),
    "split.fractions": (list, [0.8, 0.1, 0.1]),
    "split.seed": (int, 0),
    "seed": (int, 0),
    "policy": (str, "oracle"),
    "replay.mode": (str, "teacher_forced"),
    "remote.url": (str, None),
    "remote.timeout_ms": (int, 30000),
    "remote.max_retries": (int, 2),
    "remote.max_concurrency": (int, 8),
    "synthetic.template": (str, "mixed"),
    "synthetic.n": (int, 50),
    "stub.host": (str, "127.0.0.1"),
    "stub.port": (int, 8000),
    "stub.malformed": (bool, False),
    "model": (str, ""),
    "jobs": (int, 1),
    "lenient": (bool, False),
}

# paths that must exist when set
_EXISTING = ("paths.input", "paths.golden")


def flatten(doc: Mapping, prefix: str = "") -> dict:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value):
    typ = KEYS[key][0]
    if value is None:
        return None
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if typ in (str, bool, list) and isinstance(value, typ):
        return value
    raise ConfigError(f"{key}: expected {typ.__name__}, got {type(value).__name__}")


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in KEYS.items()})
    source: Optional[str] = None

    def __getitem__(self, key: str):
        return self.values[key]

    def update(self, overrides: Mapping) -> "RunConfig":
        for key, value in overrides.items():
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            if value is not None:
                self.values[key] = _coerce(key, value)
        return self

    def check(self) -> "RunConfig":
        for key in _EXISTING:
            path = self.values[key]
            if path and path != "-" and not os.path.exists(path):
                raise ConfigError(f"{key}: no such file {path!r}")
        rules = self.values["paths.rules"]
        if rules not in BUNDLED_RULES and not os.path.exists(rules):
            raise ConfigError(f"paths.rules: {rules!r} is neither a bundled rule set nor a file")
        fr = self.values["split.fractions"]
        if len(fr) != 3 or not all(isinstance(x, (int, float)) for x in fr):
            raise ConfigError("split.fractions must be three numbers")
        if self.values["jobs"] < 1:
            raise ConfigError("jobs must be >= 1")
        return self

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Mapping] = None) -> "RunConfig":
        """Defaults, then the file (``path`` or $SOPBENCH_CONFIG), then ``overrides``."""
        cfg = cls()
        path = path or os.environ.get(ENV_VAR) or None
        if path:
            try:
                with open(path, encoding="utf-8") as f:
                    doc = json.load(f)
            except OSError as exc:
                raise ConfigError(f"cannot read config {path!r}: {exc}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from None
            if not isinstance(doc, dict):
                raise ConfigError("config must be a JSON object")
            cfg.update(flatten(doc))
            cfg.source = path
        cfg.update(overrides or {})
        return cfg.check()
