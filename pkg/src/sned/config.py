"""Run configuration: one JSON document resolves every knob of a run.

The CLI materializes all defaults into ``run.json`` so that re-feeding that
file reproduces the run bit for bit.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import data as data_mod
from .model import ModelConfig
from .searchspace import SearchSpaceConfig, WarmupSchedule
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 20


@dataclass(frozen=True)
class DataConfig:
    n: int = 512
    n_val: int = 256
    frames: int = 4
    max_resolution: int = 64
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    feature_seed: int = 0
    n_eval: int = 128
    reps: int = 5


@dataclass(frozen=True)
class PathsConfig:
    dataset: str = "artifacts/data"
    checkpoints: str = "artifacts/checkpoints"
    reports: str = "artifacts/reports"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    search: SearchSpaceConfig = field(default_factory=SearchSpaceConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        warmup=WarmupSchedule(total_warmup_iterations=600, step_length=100)))
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        caps = doc["search"]["resolution_caps"]
        doc["search"]["resolution_caps"] = {str(k): v for k, v in caps.items()}
        return doc

    def validate(self) -> None:
        try:
            self.model.validate()
            self.search.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.diffusion.T < 1:
            raise ConfigError("diffusion.T must be >= 1")
        if not 1 <= self.diffusion.ddim_steps <= self.diffusion.T:
            raise ConfigError(
                f"diffusion.ddim_steps must be in 1..{self.diffusion.T}")
        if max(self.search.resolutions) > self.data.max_resolution:
            raise ConfigError(
                f"search resolution {max(self.search.resolutions)} exceeds "
                f"data.max_resolution {self.data.max_resolution}")
        for res in self.search.resolutions:
            if res % 2 != 0:
                raise ConfigError(f"resolution {res} must be even (SSR halves it)")
        if self.model.frames != self.data.frames:
            raise ConfigError(
                f"model.frames {self.model.frames} != data.frames {self.data.frames}")
        if self.model.vocab_size != data_mod.CaptionVocab.default().size:
            raise ConfigError(
                f"model.vocab_size must match the caption vocabulary "
                f"({data_mod.CaptionVocab.default().size})")


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        open_mapping = here == "search.resolution_caps"
        if isinstance(base[key], dict) and not open_mapping:
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be an object")
            out[key] = _deep_merge(base[key], value, here)
        else:
            out[key] = value
    return out


def _from_dict(doc: dict) -> RunConfig:
    caps = {int(k): float(v) for k, v in doc["search"]["resolution_caps"].items()}
    search = SearchSpaceConfig(
        ratio_set=tuple(doc["search"]["ratio_set"]),
        resolutions=tuple(int(r) for r in doc["search"]["resolutions"]),
        resolution_caps=caps,
        droppable=tuple(doc["search"]["droppable"]),
        elastic_components=tuple(doc["search"]["elastic_components"]),
    )
    train = doc["train"]
    train_cfg = TrainConfig(
        total_iterations=int(train["total_iterations"]),
        learning_rate=float(train["learning_rate"]),
        batch_size=int(train["batch_size"]),
        warmup=WarmupSchedule(**train["warmup"]),
        ema_decay=float(train["ema_decay"]),
        adam_beta1=float(train["adam_beta1"]),
        adam_beta2=float(train["adam_beta2"]),
        adam_eps=float(train["adam_eps"]),
        seed=int(train["seed"]),
        checkpoint_every=int(train["checkpoint_every"]),
        log_every=int(train["log_every"]),
    )
    return RunConfig(
        model=ModelConfig.from_dict(doc["model"]),
        search=search,
        train=train_cfg,
        diffusion=DiffusionConfig(**doc["diffusion"]),
        data=DataConfig(**doc["data"]),
        eval=EvalConfig(**doc["eval"]),
        paths=PathsConfig(**doc["paths"]),
    )


def _set_dotted(doc: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[key]
    leaf = keys[-1]
    open_mapping = dotted.startswith("search.resolution_caps.")
    if not isinstance(node, dict) or (leaf not in node and not open_mapping):
        raise ConfigError(f"unknown config key: {dotted}")
    try:
        node[leaf] = json.loads(raw)
    except json.JSONDecodeError:
        node[leaf] = raw


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the JSON file, then --key.path=value overrides."""
    doc = RunConfig().to_dict()
    if path is not None:
        try:
            with open(path) as fh:
                file_doc = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        doc = _deep_merge(doc, file_doc)
    for item in overrides or []:
        dotted, _, raw = item.partition("=")
        if not raw:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        _set_dotted(doc, dotted.lstrip("-"), raw)
    cfg = _from_dict(doc)
    cfg.validate()
    return cfg


def write_run_json(cfg: RunConfig, reports_dir: str | Path) -> Path:
    reports = Path(reports_dir)
    reports.mkdir(parents=True, exist_ok=True)
    out = reports / "run.json"
    with open(out, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out
