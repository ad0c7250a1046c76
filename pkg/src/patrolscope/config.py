"""Run configuration: one JSON document, schema-checked, with a stable hash."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import jsonschema

from .corpus import CorpusError

DEFAULTS = {
    "manifest": None,
    "window": None,
    "output_dir": "patrolscope_out",
    "rng_seed": 0,
    "workers": None,
    "max_reject_rate": 0.01,
    "thresholds": {"station_days_min": 5, "shift_min_h": 4.0, "bracket_max_h": 24.0,
                   "speed_cap_mph": 50.0},
    "qualify": {"local_time": True},
    "shifts": {"shift_max_h": None, "same_station": False},
    "presence": {"exclude_weekday_9to5": False, "local_time": True,
                 "speed_reference": "retained"},
    "models": "table1+table2",
    "synth": None,
}

# keys that change how a run executes but never what it produces
NON_SEMANTIC = ("workers", "output_dir")


class ConfigError(CorpusError):
    pass


def schema() -> dict:
    return json.loads(resources.files("patrolscope").joinpath("config.schema.json").read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b=value``; the value is read as JSON, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_override(cfg: dict, path: list[str], value) -> None:
    node = cfg
    for k in path[:-1]:
        if node.get(k) is None:
            node[k] = {}
        node = node[k]
    node[path[-1]] = value


def load_config(path=None, overrides=(), base_dir=None) -> dict:
    """Defaults < config file < overrides, validated against the schema.

    A relative ``manifest`` resolves against the config file's directory
    (or ``base_dir``); a relative ``output_dir`` against the working
    directory.
    """
    doc = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        base_dir = base_dir or path.parent
    cfg = _merge(DEFAULTS, doc)
    for p, v in overrides:
        apply_override(cfg, p, v)
    try:
        jsonschema.validate(cfg, schema())
    except jsonschema.ValidationError as e:
        where = ".".join(str(x) for x in e.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {e.message}") from e
    t = cfg["thresholds"]
    if t["shift_min_h"] > t["bracket_max_h"]:
        raise ConfigError("thresholds.shift_min_h cannot exceed thresholds.bracket_max_h")
    if cfg["manifest"] is None and cfg["synth"] is None:
        raise ConfigError("config needs either a manifest or a synth block")
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    if cfg["manifest"] is not None and not Path(cfg["manifest"]).is_absolute():
        cfg["manifest"] = str((base / cfg["manifest"]).resolve())
    cfg["output_dir"] = str(Path(cfg["output_dir"]).resolve())
    return cfg


def config_hash(cfg: dict) -> str:
    """SHA-256 over the canonical JSON of the semantic keys (12 hex chars)."""
    semantic = {k: v for k, v in cfg.items() if k not in NON_SEMANTIC}
    if semantic.get("manifest"):
        semantic["manifest"] = Path(semantic["manifest"]).name
    blob = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]
