"""Run configuration: shipped TOML defaults, user TOML file, dotted overrides."""

from __future__ import annotations

import copy
import json
import sys
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SynthConfig, synth_config_from_dict
from .encoders import EncoderConfig
from .losses import LossWeights
from .merging import MergeConfig


class ConfigError(ValueError):
    pass


def load_defaults() -> dict:
    text = resources.files("prvrlab").joinpath("defaults.toml").read_text(encoding="utf-8")
    return tomllib.loads(text)


def _merge_into(base: dict, update: dict, path: str = "") -> None:
    for k, v in update.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            _merge_into(base[k], v, where + ".")
        else:
            base[k] = v


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(cfg: dict, dotted: str) -> None:
    """Apply ``a.b.c=value``; the value is parsed as TOML, falling back to a bare string."""
    if "=" not in dotted:
        raise ConfigError(f"override {dotted!r} is not of the form key=value")
    key, raw = dotted.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(f"unknown config key {key!r}")
    old = node[parts[-1]]
    val = _parse_value(raw.strip())
    if isinstance(old, float) and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if type(old) is not type(val) and not (isinstance(old, list) or isinstance(val, list)):
        raise ConfigError(f"override {key!r}: expected {type(old).__name__}, got {raw!r}")
    node[parts[-1]] = val


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = load_defaults()
        if path:
            p = Path(path)
            if not p.exists():
                raise FileNotFoundError(str(p))
            if p.suffix == ".json":
                user = json.loads(p.read_text(encoding="utf-8"))
            else:
                user = tomllib.loads(p.read_text(encoding="utf-8"))
            _merge_into(cfg, user)
        for o in overrides:
            apply_override(cfg, o)
        out = cls(cfg)
        out.validate()
        return out

    def copy(self) -> "RunConfig":
        return RunConfig(copy.deepcopy(self.raw))

    def set(self, dotted: str) -> "RunConfig":
        apply_override(self.raw, dotted)
        self.validate()
        return self

    def validate(self) -> None:
        try:
            self.loss.validate()
            self.merge.validate()
            self.synth.validate()
            RunConfig._check_fields(EncoderConfig, self.raw["encoder"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        f = self.raw["fusion"]
        if f["w_frame"] < 0 or f["w_clip"] < 0 or abs(f["w_frame"] + f["w_clip"] - 1) > 1e-9:
            raise ConfigError("fusion weights must be >= 0 and sum to 1")
        t = self.raw["train"]
        if t["epochs"] < 1 or t["batch_size"] < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if t["dtype"] not in ("float64", "float32"):
            raise ConfigError("train.dtype must be float64 or float32")
        if self.raw["optim"]["lr"] <= 0:
            raise ConfigError("optim.lr must be > 0")

    @staticmethod
    def _check_fields(kind, d: dict):
        names = {f.name for f in fields(kind)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown keys for {kind.__name__}: {sorted(unknown)}")

    @property
    def loss(self) -> LossWeights:
        return LossWeights(**self.raw["loss"])

    @property
    def merge(self) -> MergeConfig:
        return MergeConfig(**self.raw["merge"])

    @property
    def synth(self) -> SynthConfig:
        return synth_config_from_dict(self.raw["data"]["synth"])

    def encoder(self, d_q: int, d_v: int, max_text_len: int, max_frames: int) -> EncoderConfig:
        e = self.raw["encoder"]
        return EncoderConfig(d_q=d_q, d_v=d_v, max_text_len=max_text_len, max_frames=max_frames,
                             max_clips=self.merge.clip_target, **e)

    @property
    def train(self) -> dict:
        return self.raw["train"]

    @property
    def optim(self) -> dict:
        return self.raw["optim"]

    @property
    def fusion(self) -> tuple:
        return self.raw["fusion"]["w_frame"], self.raw["fusion"]["w_clip"]

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=1, sort_keys=True)
