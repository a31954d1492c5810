"""Strict run-configuration file loading.

One JSON document with sections model / train / loss / data / masks. Every
key is checked against the known field set and unknown keys are rejected
with the offending dotted path quoted, so typos never silently fall back
to defaults. Defaults for omitted keys come from the section dataclasses
and are materialized when the effective config is echoed into a run
directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace

from .data import SynthConfig
from .errors import ConfigError
from .losses import LossWeights
from .masks import MaskConfig
from .model import ModelConfig
from .train import TrainConfig


@dataclass(frozen=True)
class DataSection:
    """Dataset sources: a prebuilt manifest and/or raw directories."""

    manifest: str | None = None
    low_dir: str | None = None
    high_dir: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        return {
            "manifest": self.manifest,
            "low_dir": self.low_dir,
            "high_dir": self.high_dir,
            "synth": {
                "mode": self.synth.mode,
                "gain_range": list(self.synth.gain_range),
                "gamma_range": list(self.synth.gamma_range),
                "grad_axis": self.synth.grad_axis,
                "tiles": self.synth.tiles,
                "seed": self.synth.seed,
            },
        }


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataSection = field(default_factory=DataSection)
    masks: MaskConfig = field(default_factory=MaskConfig)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "loss": self.loss.to_dict(),
            "data": self.data.to_dict(),
            "masks": self.masks.to_dict(),
        }

    def with_overrides(
        self, seed: int | None = None, deterministic: bool | None = None
    ) -> "RunConfig":
        """Apply command-line overrides to every section they touch."""
        out = self
        if seed is not None:
            out = replace(
                out,
                model=replace(out.model, seed=seed),
                train=replace(out.train, seed=seed),
                data=replace(out.data, synth=replace(out.data.synth, seed=seed)),
            )
        if deterministic is not None:
            out = replace(out, train=replace(out.train, deterministic=deterministic))
        return out


_SECTIONS = ("model", "train", "loss", "data", "masks")


def _check_keys(doc: dict, allowed: set[str], path: str) -> None:
    for key in doc:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f'unknown key "{where}" in run config; expected one of {sorted(allowed)}')


def _tupled(doc: dict, *names: str) -> dict:
    out = dict(doc)
    for name in names:
        if name in out and isinstance(out[name], list):
            out[name] = tuple(out[name])
    return out


def _build(section: str, cls, doc: dict, tuple_keys: tuple[str, ...] = ()):
    allowed = {f.name for f in fields(cls)}
    _check_keys(doc, allowed, section)
    try:
        cfg = cls(**_tupled(doc, *tuple_keys))
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f'invalid "{section}" section: {exc}') from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f'invalid "{section}" section: {exc}') from exc
    return cfg


def parse_run_config(doc: dict) -> RunConfig:
    """Build a validated RunConfig from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise ConfigError(f"run config must be a JSON object, got {type(doc).__name__}")
    _check_keys(doc, set(_SECTIONS), "")
    data_doc = dict(doc.get("data", {}))
    _check_keys(data_doc, {f.name for f in fields(DataSection)}, "data")
    synth = _build("data.synth", SynthConfig, data_doc.pop("synth", {}), ("gain_range", "gamma_range"))
    for key in ("manifest", "low_dir", "high_dir"):
        if key in data_doc and data_doc[key] is not None and not isinstance(data_doc[key], str):
            raise ConfigError(f'invalid "data.{key}": expected a path string')
    return RunConfig(
        model=_build("model", ModelConfig, doc.get("model", {}), ("gamma_range",)),
        train=_build("train", TrainConfig, doc.get("train", {}), ("betas",)),
        loss=_build("loss", LossWeights, doc.get("loss", {})),
        data=DataSection(synth=synth, **data_doc),
        masks=_build("masks", MaskConfig, doc.get("masks", {})),
    )


def load_run_config(path: str | os.PathLike) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    return parse_run_config(doc)
