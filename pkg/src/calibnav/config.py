"""Run configuration: one JSON document, validated before any work starts.

Values are layered: built-in defaults, then the ``--config`` file, then
``CALIBNAV_*`` environment variables, then command-line flags. Nested keys use
dotted paths on the command line (``--set train.epochs=50``) and double
underscores in the environment (``CALIBNAV_TRAIN__EPOCHS=50``).
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, create_model, field_validator

from .datasets import SplitSpec
from .losses import KdeConfig
from .planner import MpcConfig
from .predictor import LOSS_KINDS, TrainConfig

ENV_PREFIX = "CALIBNAV_"

_STRICT = ConfigDict(extra="forbid")


def _mirror(dc, name: str, overrides: dict | None = None, exclude=()) -> type[BaseModel]:
    """A forbid-extra pydantic model with the same fields and defaults as dataclass ``dc``."""
    overrides = overrides or {}
    hints = typing.get_type_hints(dc)
    fields = {}
    for f in dataclasses.fields(dc):
        if f.name in exclude:
            continue
        tp = overrides.get(f.name, hints[f.name])
        if f.default is not dataclasses.MISSING:
            fields[f.name] = (tp, f.default)
        else:
            fields[f.name] = (tp, Field(default_factory=f.default_factory))
    return create_model(name, __config__=_STRICT, **fields)


KdeSection = _mirror(KdeConfig, "KdeSection")
# the training seed is the root seed, so it is not a separate key
TrainSection = _mirror(TrainConfig, "TrainSection", {"kde": KdeSection}, exclude=("seed",))
TrainSection.model_fields["kde"].default_factory = KdeSection
TrainSection.model_rebuild(force=True)
MpcSection = _mirror(MpcConfig, "MpcSection", {"q_u": tuple[tuple[float, float], tuple[float, float]]})


class DataSection(BaseModel):
    model_config = _STRICT
    paths: list[str] = []
    cache: Optional[str] = None
    scenarios: Optional[str] = None
    split: str = "in_dist"
    train_fraction: float = 0.7

    @field_validator("split")
    @classmethod
    def _split_ok(cls, v):
        SplitSpec.parse(v)
        return v


class EvalSection(BaseModel):
    model_config = _STRICT
    bon_n: int = Field(0, ge=0)
    val_windows: int = Field(256, ge=0)


class RunConfig(BaseModel):
    model_config = _STRICT
    seed: int = 0
    out: str = "runs/default"
    predictor: str = "cv"
    data: DataSection = DataSection()
    train: TrainSection = TrainSection()
    mpc: MpcSection = MpcSection()
    eval: EvalSection = EvalSection()

    @field_validator("predictor")
    @classmethod
    def _predictor_ok(cls, v):
        if v != "cv" and not (v.startswith("mlp:") and len(v) > 4):
            raise ValueError("predictor must be 'cv' or 'mlp:<checkpoint>'")
        return v

    @field_validator("train")
    @classmethod
    def _loss_ok(cls, v):
        if v.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        return v

    def split_spec(self) -> SplitSpec:
        return SplitSpec.parse(self.data.split, self.data.train_fraction)

    def train_config(self) -> TrainConfig:
        d = self.train.model_dump()
        d["kde"] = KdeConfig(**d["kde"])
        return TrainConfig(seed=self.seed, **d)

    def kde_config(self) -> KdeConfig:
        return KdeConfig(**self.train.kde.model_dump())

    def mpc_config(self) -> MpcConfig:
        return MpcConfig(**self.mpc.model_dump())


def _parse_scalar(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(doc: dict, path: str, value: Any) -> None:
    keys = path.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ValueError(f"cannot set {path}: {k} is not a section")
    node[keys[-1]] = value


def env_overrides(environ=None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    out = {}
    for key, val in environ.items():
        if key.startswith(ENV_PREFIX):
            path = key[len(ENV_PREFIX) :].lower().replace("__", ".")
            out[path] = _parse_scalar(val)
    return out


def load_config(
    path: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
    sets: list[str] | None = None,
    environ=None,
) -> RunConfig:
    """Layer defaults, file, environment, ``KEY=VALUE`` sets and explicit overrides; then validate."""
    doc: dict = {}
    if path is not None:
        doc = json.loads(Path(path).read_text())
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: top level must be a JSON object")
    for k, v in env_overrides(environ).items():
        set_dotted(doc, k, v)
    for item in sets or []:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        set_dotted(doc, k.strip(), _parse_scalar(v))
    for k, v in (overrides or {}).items():
        if v is not None:
            set_dotted(doc, k, v)
    return RunConfig.model_validate(doc)
