"""Run configuration (YAML, ``schema_version: 1``).

Example::

    schema_version: 1
    manifest: manifest.yaml        # or "default:desk" / "default:tiny"
    out: runs/demo
    seed: 0
    method: pemma_lora             # pemma_lora | pemma_dora | early | late
    modes: [ct, pet, ctpet]
    scope: peft_only               # peft_only | wide
    late_w_ct: 0.5
    model: {side: 32, patch: 8, dim: 64, heads: 4, depth: 4}
    adaptation: {rank: 4, alpha: 8.0, targets: [q, v], dora_form: canonical, pet_init: cross_modal}
    train:
      pretrain: {lr: 1.0e-3, steps: 500}
      adapt: {lr: 1.0e-4, steps: 500}
      late: {lr: 1.0e-3, steps: 500}
      continual: {lr: 1.0e-4, steps: 100, center: F, modalities: ct}
      prognosis: {lr: 1.0e-3, steps: 300}
    eval: {splits: [adapt_test], checkpoint: auto}

Unknown keys are rejected.  Every stage section accepts ``lr``, ``steps``,
``batch_size``, ``weight_decay``, ``val_every`` and ``patience``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from pemma.adaptation import AdaptationConfig
from pemma.backbone import ModelConfig
from pemma.exceptions import ConfigError

SCHEMA_VERSION = 1
STAGES = ("pretrain", "adapt", "continual", "eval", "prognosis", "report")
METHODS = ("pemma_lora", "pemma_dora", "early", "late")
MODES = ("ct", "pet", "ctpet")
SCOPES = ("peft_only", "wide", "peft_plus_modality_paths")

STAGE_DEFAULTS: dict[str, dict[str, Any]] = {
    "pretrain": {"lr": 1e-3, "steps": 500, "batch_size": 2, "weight_decay": 1e-5, "val_every": 10, "patience": 20},
    "adapt": {"lr": 1e-4, "steps": 500, "batch_size": 2, "weight_decay": 1e-5, "val_every": 10, "patience": 20,
              "mode_probs": {"ct": 0.2, "pet": 0.2, "ctpet": 0.6}},
    "late": {"lr": 1e-3, "steps": 500, "batch_size": 2, "weight_decay": 1e-5, "val_every": 10, "patience": 20},
    "continual": {"lr": 1e-4, "steps": 100, "batch_size": 2, "weight_decay": 1e-5, "val_every": 10, "patience": 20,
                  "center": "F", "modalities": "ct", "extra_groups": []},
    "prognosis": {"lr": 1e-3, "steps": 300, "weight_decay": 1e-5, "hidden": 32, "bins": 20, "eta": 0.1,
                  "sigma": 0.1, "settings": ["CT", "CP", "CPT"]},
}
TOP_KEYS = {"schema_version", "stage", "manifest", "out", "seed", "method", "modes", "scope", "late_w_ct",
            "model", "adaptation", "train", "eval", "checkpoints"}


@dataclass
class RunConfig:
    manifest: str = "default:desk"
    out: str = "runs/default"
    seed: int = 0
    method: str = "pemma_lora"
    modes: tuple[str, ...] = MODES
    scope: str = "peft_only"
    late_w_ct: float = 0.5
    model: ModelConfig = field(default_factory=ModelConfig)
    adaptation: dict[str, Any] = field(default_factory=dict)
    train: dict[str, dict[str, Any]] = field(default_factory=dict)
    eval: dict[str, Any] = field(default_factory=lambda: {"splits": ["adapt_test"], "checkpoint": "auto"})
    checkpoints: dict[str, str] = field(default_factory=dict)
    stage: str | None = None
    root: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        self.modes = tuple(self.modes)
        bad = [m for m in self.modes if m not in MODES]
        if bad or not self.modes:
            raise ConfigError(f"modes must be a non-empty subset of {MODES}, got {list(self.modes)}")
        if self.scope not in SCOPES:
            raise ConfigError(f"scope must be one of {SCOPES}, got {self.scope!r}")
        if not 0.0 <= float(self.late_w_ct) <= 1.0:
            raise ConfigError("late_w_ct must lie in [0, 1]")
        if self.stage is not None and self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        for name, section in self.train.items():
            if name not in STAGE_DEFAULTS:
                raise ConfigError(f"unknown train section {name!r}")
            extra = set(section) - set(STAGE_DEFAULTS[name])
            if extra:
                raise ConfigError(f"train.{name}: unknown keys {sorted(extra)}")
        self.adaptation_config()

    # resolved views ------------------------------------------------------------

    def stage_params(self, stage: str) -> dict[str, Any]:
        params = copy.deepcopy(STAGE_DEFAULTS[stage])
        params.update(self.train.get(stage, {}))
        if "lr" in params and not float(params["lr"]) > 0:
            raise ConfigError(f"train.{stage}.lr must be positive")
        return params

    def adaptation_config(self) -> AdaptationConfig:
        method = {"pemma_lora": "lora", "pemma_dora": "dora"}.get(self.method, "lora")
        try:
            return AdaptationConfig(method=method, **self.adaptation)
        except TypeError as exc:
            raise ConfigError(f"bad adaptation section: {exc}") from exc

    @property
    def out_dir(self) -> Path:
        p = Path(self.out)
        return p if p.is_absolute() else self.root / p

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "stage": self.stage,
            "manifest": self.manifest,
            "out": self.out,
            "seed": self.seed,
            "method": self.method,
            "modes": list(self.modes),
            "scope": self.scope,
            "late_w_ct": self.late_w_ct,
            "model": self.model.to_dict(),
            "adaptation": dict(self.adaptation),
            "train": {k: dict(v) for k, v in self.train.items()},
            "eval": dict(self.eval),
            "checkpoints": dict(self.checkpoints),
        }


def config_from_dict(doc: dict, root=None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {doc.get('schema_version')!r} (expected {SCHEMA_VERSION})")
    extra = set(doc) - TOP_KEYS
    if extra:
        raise ConfigError(f"unknown config keys {sorted(extra)}")
    kw = {k: v for k, v in doc.items() if k not in ("schema_version", "model")}
    model_doc = doc.get("model") or {}
    known = {f.name for f in fields(ModelConfig)}
    if set(model_doc) - known:
        raise ConfigError(f"unknown model keys {sorted(set(model_doc) - known)}")
    try:
        kw["model"] = ModelConfig(**model_doc)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad model section: {exc}") from exc
    for key in ("adaptation", "train", "eval", "checkpoints"):
        if kw.get(key) is None:
            kw.pop(key, None)
    if root is not None:
        kw["root"] = Path(root)
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_dict(doc, path.resolve().parent)


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
