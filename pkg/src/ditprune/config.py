"""TOML experiment configs: strict parsing, defaults, and content hashes.

A config file has sections [model], [task], [train], [prune], [recover],
[eval], [seeds], [sweep] plus a top-level output_dir. Unknown keys anywhere
are rejected. Every artifact embeds the hash of the resolved (defaulted)
config so stage outputs are content-addressed and reruns are byte-stable.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .model import ToyDiTConfig

PRUNE_METHODS = ("learnable", "oracle", "sensitivity", "similarity", "mse",
                 "min-loss", "med-loss", "max-loss", "random")


@dataclass
class TaskSection:
    train_size: int = 50_000
    heldout_size: int = 4096
    seed: int = 0


@dataclass
class TrainSection:
    steps: int = 5000
    batch_size: int = 128
    lr: float = 2e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    log_every: int = 100


@dataclass
class PruneSection:
    method: str = "learnable"
    n_keep: int = 1
    m_block: int = 2
    keep: int | None = None          # global keep count; default depth * N / M
    update_strategy: str = "lora"
    lora_rank: int = 8
    lora_alpha: float | None = None
    steps: int | None = None
    batch_size: int = 128
    lr: float = 2e-4
    logit_lr: float = 1e-2
    grad_clip: float = 1.0
    tau_start: float = 4.0
    tau_end: float = 0.1
    tau_decay: str = "linear"
    calib_size: int = 512
    calib_seed: int = 7151
    search_samples: int = 2000

    def __post_init__(self):
        if self.method not in PRUNE_METHODS:
            raise ConfigError(f"unknown prune method {self.method!r}")


@dataclass
class RecoverSection:
    mode: str = "distill"            # finetune | distill
    alpha_kd: float = 0.9
    alpha_diff: float = 0.1
    beta: float = 1e-2
    k_sigma: float = 2.0
    centered: bool = True
    exclude: str = "union"
    steps: int = 5000
    batch_size: int = 128
    lr: float = 2e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    lr_halvings: int = 4
    log_every: int = 100

    def __post_init__(self):
        if self.mode not in ("finetune", "distill"):
            raise ConfigError(f"unknown recover mode {self.mode!r}")


@dataclass
class EvalSection:
    sample_n: int = 2000
    sample_steps: int | None = None
    use_ema: bool = True
    with_samples: bool = True
    bench_batch: int = 256
    bench_trials: int = 7
    bench_depths: list[int] = field(default_factory=lambda: [8, 4])


@dataclass
class SeedsSection:
    base: int = 0
    sweep: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class SweepSection:
    methods: list[str] = field(default_factory=lambda: ["learnable", "oracle",
                                                        "min-loss", "sensitivity"])
    workers: int = 1

    def __post_init__(self):
        for m in self.methods:
            if m not in PRUNE_METHODS:
                raise ConfigError(f"unknown sweep method {m!r}")


@dataclass
class ExperimentConfig:
    model: ToyDiTConfig
    task: TaskSection
    train: TrainSection
    prune: PruneSection
    recover: RecoverSection
    eval: EvalSection
    seeds: SeedsSection
    sweep: SweepSection
    output_dir: str = "out"

    def resolved(self) -> dict:
        """Full defaulted config as plain data (excludes output_dir)."""
        out = {name: asdict(getattr(self, name))
               for name in ("model", "task", "train", "prune", "recover",
                            "eval", "seeds", "sweep")}
        return out


_SECTIONS = {
    "model": ToyDiTConfig,
    "task": TaskSection,
    "train": TrainSection,
    "prune": PruneSection,
    "recover": RecoverSection,
    "eval": EvalSection,
    "seeds": SeedsSection,
    "sweep": SweepSection,
}


def _build_section(cls, name: str, data: dict):
    fields = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise ConfigError(f"unknown key '{name}.{key}'")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"invalid section [{name}]: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    known = set(_SECTIONS) | {"output_dir"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key '{key}'")
    sections = {}
    for name, cls in _SECTIONS.items():
        data = raw.get(name, {})
        if not isinstance(data, dict):
            raise ConfigError(f"section [{name}] must be a table")
        sections[name] = _build_section(cls, name, data)
    output_dir = raw.get("output_dir", "out")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string")
    return ExperimentConfig(output_dir=output_dir, **sections)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    with open(p, "rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {p}: {exc}") from exc
    return config_from_dict(raw)


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(data) -> str:
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def stage_hash(cfg: ExperimentConfig, stage: str, seed: int,
               parent: str | None = None, extra: dict | None = None) -> str:
    """Content address for one stage's outputs.

    Chains the parent stage's hash so shared pipeline prefixes collide (and
    can be reused) exactly when every upstream input matches.
    """
    resolved = cfg.resolved()
    relevant = {
        "train-base": ("model", "task", "train"),
        "prune": ("model", "task", "prune"),
        "recover": ("model", "task", "recover"),
        "eval": ("model", "task", "eval"),
        "bench": ("model", "eval"),
    }[stage]
    payload = {
        "stage": stage,
        "seed": seed,
        "parent": parent,
        "sections": {k: resolved[k] for k in relevant},
        "extra": extra or {},
    }
    return config_hash(payload)
