"""Configuration dataclasses and JSON loading/validation for the engine and harness."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from sparsevcd.errors import ConfigError


@dataclass
class ModelConfig:
    """Model block of the experiment JSON config."""

    kind: str = "transformer"  # "transformer" | "composer"
    seed: int = 1
    d_model: int = 16
    layers: int = 2
    heads: int = 2
    vocab: int = 64
    # composer-only fields
    a_vis: float = 2.0
    b_prior: float = 3.0
    sigma: float = 0.1
    finding_ids: list[int] = field(default_factory=list)
    prior: list[float] = field(default_factory=list)
    eos_logit: float = 2.1
    filler_logit: float = -1.0
    repeat_penalty: float = 1000.0

    def validate(self) -> None:
        if self.kind not in ("transformer", "composer"):
            raise ConfigError(f"model.kind must be 'transformer' or 'composer', got {self.kind!r}")
        if self.vocab < 8:
            raise ConfigError("model.vocab must be at least 8")
        if self.kind == "transformer":
            if self.d_model <= 0 or self.layers <= 0 or self.heads <= 0:
                raise ConfigError("transformer dims must be positive")
            if self.d_model % self.heads != 0:
                raise ConfigError("model.d_model must be divisible by model.heads")
        if self.kind == "composer":
            if self.prior and self.finding_ids and len(self.prior) != len(self.finding_ids):
                raise ConfigError("model.prior must have one weight per finding id")


@dataclass
class SparsifyConfig:
    """Token-sparsification and attention-calibration hyperparameters."""

    sparsity_rate: float = 0.8
    lambda_: float = 0.1
    w_recent: int = 8
    rho_merge: float = 0.25
    knn_k: int = 5
    early_layer_frac: float = 0.25
    per_head_mask: bool = False
    l_min: int = 16
    mode: str = "logical"  # "logical" | "compacted"
    compact_band: int = 64
    merge_pruned: bool = True
    prune_scope: str = "full"  # "full" | "text_only"
    beta: float = 0.1
    sac_enabled: bool = True
    sac_input: str = "probabilities"  # "probabilities" | "raw_scores"
    sac_before_vats: bool = True

    def validate(self) -> None:
        if not 0.0 < self.sparsity_rate <= 1.0:
            raise ConfigError("sparsify.sparsity_rate must be in (0, 1]")
        if self.lambda_ < 0.0:
            raise ConfigError("sparsify.lambda_ must be non-negative")
        if self.w_recent < 0:
            raise ConfigError("sparsify.w_recent must be non-negative")
        if not 0.0 < self.rho_merge <= 1.0:
            raise ConfigError("sparsify.rho_merge must be in (0, 1]")
        if self.knn_k < 1:
            raise ConfigError("sparsify.knn_k must be at least 1")
        if not 0.0 < self.early_layer_frac <= 1.0:
            raise ConfigError("sparsify.early_layer_frac must be in (0, 1]")
        if self.mode not in ("logical", "compacted"):
            raise ConfigError("sparsify.mode must be 'logical' or 'compacted'")
        if self.mode == "compacted" and self.per_head_mask:
            raise ConfigError("per-head masks are only supported in logical mode")
        if self.compact_band < 0:
            raise ConfigError("sparsify.compact_band must be non-negative")
        if self.prune_scope not in ("full", "text_only"):
            raise ConfigError("sparsify.prune_scope must be 'full' or 'text_only'")
        if self.beta < 0.0:
            raise ConfigError("sparsify.beta must be non-negative")
        if self.sac_input not in ("probabilities", "raw_scores"):
            raise ConfigError("sparsify.sac_input must be 'probabilities' or 'raw_scores'")


@dataclass
class DecodeConfig:
    """Contrastive-decoding loop hyperparameters."""

    alpha: float = 0.3
    gamma_apc: float = 0.1
    visual_mask_rate: float = 0.5
    stop_layer: int = 0
    beam_size: int = 2
    max_len: int = 64
    seed: int = 0
    mode: str = "greedy"  # "greedy" | "beam"
    pooling: str = "mean"  # "mean" | "last"
    eos_id: int = 0  # -1 disables EOS stopping (benchmarks)

    def validate(self) -> None:
        if self.alpha < 0.0:
            raise ConfigError("decode.alpha must be non-negative")
        if not 0.0 <= self.gamma_apc <= 1.0:
            raise ConfigError("decode.gamma_apc must be in [0, 1]")
        if not 0.0 <= self.visual_mask_rate <= 1.0:
            raise ConfigError("decode.visual_mask_rate must be in [0, 1]")
        if self.stop_layer < 0:
            raise ConfigError("decode.stop_layer must be non-negative")
        if self.beam_size < 1:
            raise ConfigError("decode.beam_size must be positive")
        if self.max_len < 1:
            raise ConfigError("decode.max_len must be positive")
        if self.mode not in ("greedy", "beam"):
            raise ConfigError("decode.mode must be 'greedy' or 'beam'")
        if self.pooling not in ("mean", "last"):
            raise ConfigError("decode.pooling must be 'mean' or 'last'")
        if self.eos_id < -1:
            raise ConfigError("decode.eos_id must be non-negative, or -1 to disable")


@dataclass
class AblationConfig:
    """Mechanism toggles; all default on."""

    vats: bool = True
    vps: bool = True
    mbs: bool = True
    sac: bool = True


@dataclass
class ExperimentConfig:
    """Top-level harness configuration."""

    model: ModelConfig = field(default_factory=ModelConfig)
    sparsify: SparsifyConfig = field(default_factory=SparsifyConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    corpus: str = ""
    seeds: list[int] = field(default_factory=lambda: [0])
    out_csv: str = "results.csv"
    out_diagnostics: str = ""
    timing: bool = False
    workers: int = 1

    def validate(self) -> None:
        self.model.validate()
        self.sparsify.validate()
        self.decode.validate()
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.workers < 1:
            raise ConfigError("workers must be positive")

    def effective_sparsify(self) -> SparsifyConfig:
        """Sparsify config with ablation toggles folded into neutral values."""
        cfg = dataclasses.replace(self.sparsify)
        if not self.ablation.vats:
            cfg.lambda_ = 0.0
            cfg.merge_pruned = False
        if not self.ablation.vps:
            cfg.lambda_ = 0.0
        if not self.ablation.sac:
            cfg.beta = 0.0
        return cfg

    def effective_decode(self) -> DecodeConfig:
        cfg = dataclasses.replace(self.decode)
        if not self.ablation.mbs:
            cfg.visual_mask_rate = 0.0
        return cfg


_SECTION_TYPES = {
    "model": ModelConfig,
    "sparsify": SparsifyConfig,
    "decode": DecodeConfig,
    "ablation": AblationConfig,
}


def _build_section(cls, data: dict, path: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    # accept "lambda" as an alias since it is a Python keyword
    if cls is SparsifyConfig and "lambda" in data:
        data = dict(data)
        data["lambda_"] = data.pop("lambda")
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config field {path}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config section {path}: {exc}") from exc


def experiment_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    cfg = ExperimentConfig()
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key} must be an object")
            setattr(cfg, key, _build_section(_SECTION_TYPES[key], value, key))
        elif key in ("corpus", "out_csv", "out_diagnostics"):
            setattr(cfg, key, str(value))
        elif key == "seeds":
            cfg.seeds = [int(s) for s in value]
        elif key == "timing":
            cfg.timing = bool(value)
        elif key == "workers":
            cfg.workers = int(value)
        else:
            raise ConfigError(f"unknown config field {key}")
    cfg.validate()
    return cfg


def load_experiment(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return experiment_from_dict(data)


def flatten_config(cfg: ExperimentConfig) -> dict[str, object]:
    """Flattened (section.field -> value) view used for result rows."""
    out: dict[str, object] = {}
    for section in ("model", "sparsify", "decode", "ablation"):
        block = getattr(cfg, section)
        for f in dataclasses.fields(block):
            value = getattr(block, f.name)
            if isinstance(value, list):
                value = ";".join(str(v) for v in value)
            out[f"{section}.{f.name}"] = value
    return out
