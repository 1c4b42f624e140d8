"""Flat key-value config files (INI syntax) shared by every command.

One file may hold any of these sections::

    [synthetic]       generator settings; ``days`` is required
    [event.<name>]    one per special event (start_day, end_day, scale, offset, profile)
    [network]         architecture counts
    [training]        batch training (also used for the target's own year-1 model)
    [retrain]         retraining of transferred models
    [scratch]         fresh model trained on the target's first month
    [online]          learning_rate, updates_per_sample
    [scenario]        year_days, month_days, r2_window
"""

from __future__ import annotations

import configparser
import dataclasses
from datetime import date
from pathlib import Path

import numpy as np

from .data import SpecialEvent, SyntheticConfig
from .errors import ConfigError, SpecificationError
from .evaluation import ScenarioConfig
from .lifecycle import OnlineConfig, TrainingConfig, retrain_defaults
from .nn_core import NetworkSpec


def read_config(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parser


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is date:
            return date.fromisoformat(raw.strip())
        if kind is np.ndarray:
            return np.array([float(x) for x in raw.replace("\n", ",").split(",") if x.strip()])
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {raw!r} as {kind.__name__}") from None


def _section_kwargs(parser, section: str, fields: dict, required=()) -> dict:
    if not parser.has_section(section):
        if required:
            raise ConfigError(f"missing section [{section}] (needs key {required[0]!r})")
        return {}
    body = parser[section]
    for key in required:
        if key not in body:
            raise ConfigError(f"[{section}] missing required key {key!r}")
    unknown = set(body) - set(fields)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(sorted(unknown))}")
    return {k: _convert(section, k, body[k], fields[k]) for k in body}


_SYNTHETIC_FIELDS = {
    "days": int,
    "seed": int,
    "base_profile": np.ndarray,
    "amplitude": float,
    "weekend_scale": float,
    "drift": float,
    "noise_std": float,
    "propagation_lag": int,
    "days_per_year": int,
    "start": date,
    "road_name": str,
}
_EVENT_FIELDS = {"start_day": int, "end_day": int, "scale": float, "offset": float, "profile": np.ndarray}
_NETWORK_FIELDS = {f.name: (bool if f.name == "stateful" else int) for f in dataclasses.fields(NetworkSpec)}
_TRAINING_FIELDS = {
    "epochs": int,
    "learning_rate": float,
    "seed": int,
    "batch_policy": str,
    "normalizer_source": str,
}
_ONLINE_FIELDS = {"learning_rate": float, "updates_per_sample": int}
_SCENARIO_FIELDS = {"year_days": int, "month_days": int, "r2_window": int}


def synthetic_config(parser) -> SyntheticConfig:
    kw = _section_kwargs(parser, "synthetic", _SYNTHETIC_FIELDS, required=("days",))
    events = []
    for name in parser.sections():
        if name.startswith("event"):
            ev = _section_kwargs(parser, name, _EVENT_FIELDS, required=("start_day", "end_day"))
            events.append(SpecialEvent(**ev))
    cfg = SyntheticConfig(**kw, special_events=events)
    try:
        cfg.validate()
    except SpecificationError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def network_spec(parser) -> NetworkSpec:
    try:
        return NetworkSpec(**_section_kwargs(parser, "network", _NETWORK_FIELDS))
    except SpecificationError as exc:
        raise ConfigError(f"[network] {exc}") from None


def training_config(parser, section: str = "training") -> TrainingConfig:
    kw = _section_kwargs(parser, section, _TRAINING_FIELDS)
    cfg = TrainingConfig(**kw) if section == "training" else retrain_defaults(**kw)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None
    return cfg


def online_config(parser) -> OnlineConfig:
    cfg = OnlineConfig(**_section_kwargs(parser, "online", _ONLINE_FIELDS))
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"[online] {exc}") from None
    return cfg


def scenario_config(parser, year_days: int | None = None) -> ScenarioConfig:
    kw = _section_kwargs(parser, "scenario", _SCENARIO_FIELDS)
    if year_days is not None:
        kw["year_days"] = year_days
    return ScenarioConfig(
        network=network_spec(parser),
        batch=training_config(parser, "training"),
        retrain=training_config(parser, "retrain"),
        scratch=training_config(parser, "scratch"),
        online=online_config(parser),
        **kw,
    )


def empty_config() -> configparser.ConfigParser:
    return configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))


def load(path) -> configparser.ConfigParser:
    if path is None:
        return empty_config()
    if not Path(path).exists():
        raise ConfigError(f"config file {path} not found")
    return read_config(path)
