"""Run configuration: flat dotted keys in TOML, overridable key by key.

Example file::

    seed = 7
    data.manifest = "synthetic/manifest.json"
    output.dir = "runs/a"
    model.head_width = 12
    train.lr0 = 0.001
    train.epochs = 80
"""
from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig}
TOP_KEYS = ("seed", "data.manifest", "output.dir")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    manifest: str | None = None
    out_dir: str = "runs/default"
    seed: int = 0

    def flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {"seed": self.seed}
        if self.manifest is not None:
            out["data.manifest"] = self.manifest
        out["output.dir"] = self.out_dir
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                if f.name != "seed":
                    out[f"{section}.{f.name}"] = getattr(obj, f.name)
        return out


def valid_keys() -> list[str]:
    keys = list(TOP_KEYS)
    for section, cls in SECTIONS.items():
        keys += [f"{section}.{f.name}" for f in fields(cls) if f.name != "seed"]
    return keys


def _flatten(doc: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_value(text: str) -> Any:
    """Interpret a command-line value with TOML literal rules; bare words stay strings."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_flat(path) -> dict[str, Any]:
    path = Path(path)
    try:
        return _flatten(tomllib.loads(path.read_text()))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc


def resolve(flat: Mapping[str, Any], base: RunConfig | None = None) -> RunConfig:
    """Apply flat dotted keys over ``base``; the top-level seed feeds model and training."""
    unknown = sorted(set(flat) - set(valid_keys()))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    base = base or RunConfig()
    seed = int(flat.get("seed", base.seed))
    parts = {}
    for section, cls in SECTIONS.items():
        current = getattr(base, section)
        updates = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith(section + ".")}
        updates["seed"] = seed
        try:
            parts[section] = replace(current, **updates)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {section} config: {exc}") from exc
    return RunConfig(
        model=parts["model"],
        train=parts["train"],
        manifest=flat.get("data.manifest", base.manifest),
        out_dir=str(flat.get("output.dir", base.out_dir)),
        seed=seed,
    )


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return json.dumps(v)


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in cfg.flat().items())


def load(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """File values first, then overrides (flag wins)."""
    flat = load_flat(path) if path is not None else {}
    flat.update(overrides or {})
    return resolve(flat)
