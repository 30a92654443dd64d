"""Flat key=value configuration covering scene generation and training."""
from __future__ import annotations

import configparser
import os
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Iterable

from .scenes import SceneGenConfig
from .training import TrainConfig

SEED_ENV = "SKETCHYSEG_SEED"
_GROUPS = {"scene": SceneGenConfig, "train": TrainConfig}


class ConfigError(ValueError):
    pass


def _coerce(raw: str, default: Any, key: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if default and isinstance(default[0], int):
                sep = "," if "," in text else "-"   # ranges may be written 3-8
                return tuple(int(p) for p in text.split(sep))
            return tuple(p.strip() for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return text


def parse_text(text: str) -> dict[str, str]:
    """key=value lines; '#' and ';' comments; an optional [section] header is ignored."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    body = text if text.lstrip().startswith("[") else "[config]\n" + text
    try:
        parser.read_string(body)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    out: dict[str, str] = {}
    for section in parser.sections():
        out.update(parser[section])
    return out


def load_file(path) -> dict[str, str]:
    return parse_text(Path(path).read_text())


def parse_assignments(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build(values: dict[str, str], env: dict[str, str] | None = None
          ) -> tuple[SceneGenConfig, TrainConfig]:
    """Apply raw values onto default configs.

    A bare key sets the field in every group that has it; ``scene.<key>`` and
    ``train.<key>`` address one group.  ``SKETCHYSEG_SEED`` in ``env`` replaces
    the seed of both groups unless a value was given explicitly for it.
    """
    env = os.environ if env is None else env
    updates: dict[str, dict[str, Any]] = {g: {} for g in _GROUPS}
    defaults = {g: {f.name: getattr(cls(), f.name) for f in fields(cls)} for g, cls in _GROUPS.items()}
    for key, raw in values.items():
        group, _, name = key.rpartition(".")
        targets = [group] if group else [g for g in _GROUPS if name in defaults[g]]
        if not targets or any(g not in _GROUPS or name not in defaults[g] for g in targets):
            raise ConfigError(f"unknown configuration key {key!r}")
        for g in targets:
            updates[g][name] = _coerce(raw, defaults[g][name], key)
    if SEED_ENV in env:
        seed = _coerce(env[SEED_ENV], 0, SEED_ENV)
        for g in _GROUPS:
            updates[g].setdefault("seed", seed)
    try:
        scene = replace(SceneGenConfig(), **updates["scene"])
        train = replace(TrainConfig(), **updates["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return scene, train


def resolve(config_path=None, overrides: dict[str, str] | None = None,
            env: dict[str, str] | None = None) -> tuple[SceneGenConfig, TrainConfig]:
    """File values, then the environment seed, then explicit overrides (highest)."""
    values = load_file(config_path) if config_path else {}
    env = dict(os.environ if env is None else env)
    overrides = overrides or {}
    if SEED_ENV in env:
        # the environment beats the file but not an explicit flag
        values = {k: v for k, v in values.items() if k.rpartition(".")[2] != "seed"}
    values.update(overrides)
    return build(values, env)


def dump(scene: SceneGenConfig, train: TrainConfig) -> str:
    lines = []
    for group, cfg in (("scene", scene), ("train", train)):
        for f in fields(cfg):
            v = getattr(cfg, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{group}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
