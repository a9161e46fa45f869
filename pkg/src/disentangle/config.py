"""Run configuration: sectioned key=value files with typed parsing.

Unknown sections or keys are errors. Every stage derives its own seed from
the root seed and the stage name, so partial reruns stay reproducible.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

from .lm import LmConfig
from .world import AttributeSpec, WorldSpec


class ConfigError(ValueError):
    pass


@dataclass
class WorldSection:
    spec_path: str = ""  # optional JSON file with an "attributes" list
    n_entities: int = 200
    n_attribute_templates: int = 8
    n_entity_templates: int = 8
    few_shot: int = 0
    entity_type: str = "place"


@dataclass
class TupleSection:
    n_train: int = 1024
    n_dev: int = 256
    n_test: int = 256
    entity_prompt_rate: float = 0.5
    distinct: bool = True


@dataclass
class FilterSection:
    threshold: float = 0.9


@dataclass
class FeaturizerSection:
    method: str = "das"
    attribute: str = "continent"
    layer: int = 2
    k: int = 8
    layers: str = "0,1,2,3,4,5"
    ks: str = "2,4,8,16,32"
    steps: int = 600
    lr: float = 1e-2
    batch_size: int = 64
    dbm_lr: float = 1e-3
    lam: float = -1.0  # negative means the per-method default
    eps: float = 0.1
    t_start: float = 1e-2
    t_end: float = 1e-7
    l1_on_logits: bool = False
    C: float = 1.0
    select_eps: float = 1e-3
    sae_l1: float = 1e-3
    sae_steps: int = 3000
    sae_ratio: int = 4
    rlap_iterations: int = 100
    n_activations: int = 2048

    @property
    def layer_grid(self) -> list[int]:
        return _int_list(self.layers)

    @property
    def k_grid(self) -> list[int]:
        return _int_list(self.ks)


@dataclass
class RunSection:
    seed: int = 0
    split_mode: str = "entity"
    threads: int = 1


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    world: WorldSection = field(default_factory=WorldSection)
    lm: LmConfig = field(default_factory=LmConfig)
    filter: FilterSection = field(default_factory=FilterSection)
    tuples: TupleSection = field(default_factory=TupleSection)
    featurizer: FeaturizerSection = field(default_factory=FeaturizerSection)

    def stage_seed(self, stage: str) -> int:
        return stage_seed(self.run.seed, stage)

    def world_spec(self) -> WorldSpec:
        w = self.world
        kw = dict(
            n_entities=w.n_entities,
            n_attribute_templates=w.n_attribute_templates,
            n_entity_templates=w.n_entity_templates,
            few_shot=w.few_shot,
            seed=self.stage_seed("gen-world"),
            entity_type=w.entity_type,
        )
        if w.spec_path:
            path = Path(w.spec_path)
            if not path.exists():
                raise FileNotFoundError(path)
            data = json.loads(path.read_text())
            kw["attributes"] = tuple(AttributeSpec(**a) for a in data["attributes"])
        return WorldSpec(**kw)

    def lm_config(self) -> LmConfig:
        return dataclasses.replace(self.lm, seed=self.stage_seed("train-lm"))

    def to_text(self) -> str:
        """Resolved config in the same format ``load_config`` reads."""
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            obj = getattr(self, sec.name)
            for f in fields(obj):
                if sec.name == "lm" and f.name == "vocab_size":
                    continue
                v = getattr(obj, f.name)
                lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
            lines.append("")
        return "\n".join(lines)


def stage_seed(root: int, stage: str) -> int:
    digest = hashlib.sha256(f"{root}/{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def _coerce(kind, raw: str, where: str):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from e


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    cfg = RunConfig()
    sections = {f.name: f for f in fields(cfg)}
    for name in cp.sections():
        if name not in sections:
            raise ConfigError(f"unknown section [{name}]")
        obj = getattr(cfg, name)
        hints = get_type_hints(type(obj))
        known = {f.name for f in fields(obj)} - {"vocab_size"}
        updates = {}
        for key, raw in cp.items(name):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            updates[key] = _coerce(hints[key], raw, f"[{name}] {key}")
        try:
            setattr(cfg, name, dataclasses.replace(obj, **updates))
        except ValueError as e:
            raise ConfigError(f"[{name}]: {e}") from e
    if cfg.run.split_mode not in ("entity", "context"):
        raise ConfigError(f"split_mode must be entity or context, got {cfg.run.split_mode!r}")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text())
