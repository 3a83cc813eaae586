"""Run configuration: a strict JSON document with one section per stage.

Unknown keys are rejected everywhere so typos fail before a run starts.
Defaults are the reported best configuration; the learning rate is the
one exception — when no lr is given and the small built-in encoder is
selected, a desk-scale default of 1e-3 is applied instead of the 8e-6
used with large pretrained backbones (recorded in the manifest).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .geo_prompt import DEFAULT_SEMI_SOFT_TEMPLATE, PromptSpec

SMALL_ENCODER_LR = 1e-3  # desk-scale default, not a reported value
BACKBONE_LR = 8e-6


class ConfigError(ValueError):
    """Raised for unknown keys or invalid values in a run config."""


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "toy"
    hidden_size: int = 32
    vocab_size: int = 4096
    max_len_user: int = 128
    max_len_prompt: int = 32
    lowercase: bool = True
    use_positions: bool = True

    def __post_init__(self):
        if self.kind != "toy":
            raise ConfigError(f"unknown encoder kind {self.kind!r}; only 'toy' ships with this package")


@dataclass(frozen=True)
class RepresentationConfig:
    strategy: str = "In1"
    num_posts: int = 6
    field_filter: str = "All"
    fusion: str = "MeanPool"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "contrastive"  # or "classifier"
    tau: float = 0.03
    k: int = 6
    mining: str = "multinomial"
    fusion_kind: str = "Concat"
    contrast_scope: str = "all"  # or "batch"

    def __post_init__(self):
        if self.kind not in ("contrastive", "classifier"):
            raise ConfigError(f"unknown objective kind {self.kind!r}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        if self.mining not in ("multinomial", "top"):
            raise ConfigError(f"unknown mining kind {self.mining!r}")
        if self.contrast_scope not in ("all", "batch"):
            raise ConfigError(f"unknown contrast scope {self.contrast_scope!r}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    eval_batch_size: int = 1
    epochs: int = 100
    lr: float = BACKBONE_LR
    tau: float = 0.03
    opt_beta1: float = 0.85
    opt_beta2: float = 0.999
    weight_decay: float = 0.01
    patience: int = 10
    seed: int = 0
    mode: str = "fewshot"  # or "zeroshot"
    shots: tuple[int, ...] = (8,)

    def __post_init__(self):
        for name in ("batch_size", "eval_batch_size", "lr", "tau", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.weight_decay < 0:
            raise ConfigError("epochs and weight_decay must be >= 0")
        if self.mode not in ("fewshot", "zeroshot"):
            raise ConfigError(f"unknown train mode {self.mode!r}")
        if self.mode == "fewshot" and not self.shots:
            raise ConfigError("fewshot mode needs at least one shot count")


@dataclass(frozen=True)
class SplitConfig:
    global_seed: int = 0
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    dev_cap: int | None = None
    min_count: int = 3
    shot_seeds: tuple[int, int, int] = (101, 202, 303)
    manifest: str | None = None  # use a precomputed split instead


@dataclass(frozen=True)
class EvalConfig:
    write_text_table: bool = True
    write_plot: bool = False


@dataclass(frozen=True)
class RunConfig:
    dataset_path: str
    split: SplitConfig = field(default_factory=SplitConfig)
    representation: RepresentationConfig = field(default_factory=RepresentationConfig)
    prompt: PromptSpec = field(default_factory=lambda: PromptSpec(kind="semisoft", template=DEFAULT_SEMI_SOFT_TEMPLATE))
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    lr_profile: str = "paper"


def _take(section: Mapping, allowed: dict[str, Any], what: str) -> dict:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{what}' section: {sorted(unknown)}")
    return dict(section)


def _tupled(value, n: int | None = None) -> tuple:
    out = tuple(value)
    if n is not None and len(out) != n:
        raise ConfigError(f"expected {n} values, got {len(out)}")
    return out


def run_config_from_dict(obj: Mapping) -> RunConfig:
    """Parse and validate a full config document."""
    top = _take(obj, {k: None for k in ("dataset", "split", "representation", "prompt", "objective", "train", "eval")}, "top-level")
    dataset = _take(top.get("dataset", {}), {"path": None}, "dataset")
    if "path" not in dataset:
        raise ConfigError("dataset section needs a 'path'")

    split_raw = _take(
        top.get("split", {}),
        {"global_seed": None, "ratios": None, "dev_cap": None, "min_count": None, "shot_seeds": None, "manifest": None},
        "split",
    )
    if "ratios" in split_raw:
        split_raw["ratios"] = _tupled(split_raw["ratios"], 3)
    if "shot_seeds" in split_raw:
        split_raw["shot_seeds"] = _tupled(split_raw["shot_seeds"], 3)
    split = SplitConfig(**split_raw)

    objective_raw = _take(
        top.get("objective", {}),
        {"kind": None, "tau": None, "k": None, "mining": None, "fusion_kind": None, "contrast_scope": None},
        "objective",
    )
    objective = ObjectiveConfig(**objective_raw)

    rep_raw = _take(
        top.get("representation", {}),
        {"strategy": None, "num_posts": None, "field_filter": None, "fusion": None, "encoder": None},
        "representation",
    )
    enc_raw = _take(
        rep_raw.pop("encoder", {}),
        {f.name: None for f in dataclasses.fields(EncoderConfig)},
        "representation.encoder",
    )
    if "field_filter" not in rep_raw and objective.kind == "classifier":
        # reported best input set differs by objective: All for the
        # contrastive model, NoPostTime for the classification baseline
        rep_raw["field_filter"] = "NoPostTime"
    representation = RepresentationConfig(encoder=EncoderConfig(**enc_raw), **rep_raw)

    prompt_raw = _take(top.get("prompt", {}), {"kind": None, "template": None, "m": None, "sigma": None}, "prompt")
    if "kind" not in prompt_raw:
        prompt_raw = {"kind": "semisoft", "template": DEFAULT_SEMI_SOFT_TEMPLATE, **prompt_raw}
    try:
        prompt = PromptSpec(**prompt_raw)
    except ValueError as exc:
        raise ConfigError(f"prompt section: {exc}") from exc

    train_raw = _take(
        top.get("train", {}),
        {f.name: None for f in dataclasses.fields(TrainConfig)},
        "train",
    )
    if "shots" in train_raw:
        train_raw["shots"] = _tupled(train_raw["shots"])
    if "tau" in train_raw and train_raw["tau"] != objective.tau:
        raise ConfigError("train.tau and objective.tau disagree; set the temperature once")
    train_raw["tau"] = objective.tau
    if "lr" not in train_raw and representation.encoder.kind == "toy":
        train_raw["lr"] = SMALL_ENCODER_LR
    train = TrainConfig(**train_raw)
    # provenance marker for the manifest: 8e-6 is the reported value, any
    # other rate (including the desk-scale toy default) is not
    lr_profile = "paper" if train.lr == BACKBONE_LR else "non-paper"

    eval_raw = _take(top.get("eval", {}), {"write_text_table": None, "write_plot": None}, "eval")
    eval_cfg = EvalConfig(**eval_raw)

    return RunConfig(
        dataset_path=dataset["path"],
        split=split,
        representation=representation,
        prompt=prompt,
        objective=objective,
        train=train,
        eval=eval_cfg,
        lr_profile=lr_profile,
    )


def run_config_to_dict(cfg: RunConfig) -> dict:
    """Inverse of run_config_from_dict, suitable for manifests."""
    prompt: dict = {"kind": cfg.prompt.kind}
    if cfg.prompt.template is not None:
        prompt["template"] = cfg.prompt.template
    if cfg.prompt.m is not None:
        prompt["m"] = cfg.prompt.m
    if cfg.prompt.kind == "soft":
        prompt["sigma"] = cfg.prompt.sigma
    return {
        "dataset": {"path": cfg.dataset_path},
        "split": {
            "global_seed": cfg.split.global_seed,
            "ratios": list(cfg.split.ratios),
            "dev_cap": cfg.split.dev_cap,
            "min_count": cfg.split.min_count,
            "shot_seeds": list(cfg.split.shot_seeds),
            "manifest": cfg.split.manifest,
        },
        "representation": {
            "strategy": cfg.representation.strategy,
            "num_posts": cfg.representation.num_posts,
            "field_filter": cfg.representation.field_filter,
            "fusion": cfg.representation.fusion,
            "encoder": dataclasses.asdict(cfg.representation.encoder),
        },
        "prompt": prompt,
        "objective": dataclasses.asdict(cfg.objective),
        "train": {**dataclasses.asdict(cfg.train), "shots": list(cfg.train.shots)},
        "eval": dataclasses.asdict(cfg.eval),
    }


def load_run_config(path: str | Path) -> RunConfig:
    """Load a config file; a run manifest is accepted and replayed as-is."""
    with open(path, "r", encoding="utf-8") as handle:
        obj = json.load(handle)
    if isinstance(obj, dict) and obj.get("kind") == "run_manifest":
        obj = obj["config"]
    return run_config_from_dict(obj)


def override_config(cfg: RunConfig, path: str, value) -> RunConfig:
    """Return a copy of cfg with one dotted key replaced (ablation plumbing)."""
    obj = run_config_to_dict(cfg)
    parts = path.split(".")
    node = obj
    for part in parts[:-1]:
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {path!r}")
    node[parts[-1]] = value
    return run_config_from_dict(obj)
