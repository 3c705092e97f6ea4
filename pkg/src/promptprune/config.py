"""Run configuration. Every section rejects unknown keys."""

from __future__ import annotations

import hashlib
import json
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CorpusConfig(_Strict):
    K: int = Field(8, ge=2)
    d_z: int = Field(32, ge=2)
    per_cluster: int = Field(512, ge=1)
    sigma_c: float = Field(0.1, ge=0.0)
    data_dim: int = Field(64, ge=2)
    max_harmonics: int = Field(8, ge=1)
    harmonic_amplitude: float = Field(0.5, ge=0.0)
    data_noise: float = Field(0.05, ge=0.0)
    modes: int = Field(16, ge=0)
    heldout_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _budget(self):
        if self.max_harmonics > self.data_dim // 2:
            raise ValueError("max_harmonics must be <= data_dim // 2")
        return self


class ScheduleConfig(_Strict):
    T: int = Field(100, ge=2)
    kind: Literal["linear"] = "linear"
    beta_start: float = Field(1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(0.2, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _order(self):
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must be <= beta_end")
        return self


class ModelConfig(_Strict):
    model_dim: int = Field(64, ge=1)
    hidden: int = Field(32, ge=1)
    time_dim: int = Field(16, ge=0)
    output_skip: bool = True


class PruningConfig(_Strict):
    gamma: float = Field(0.4, gt=0.0)
    tau: float = Field(0.03, gt=0.0)
    eps_ot: float = Field(0.05, gt=0.0)
    sinkhorn_iters: int = Field(3, ge=1)
    lambda_distill: float = Field(0.2, ge=0.0)
    lambda_res: float = Field(2.0, ge=0.0)
    lambda_cont: float = Field(100.0, ge=0.0)
    target_macs: float = Field(0.7, gt=0.0, le=1.0)
    N: int = Field(4, ge=1)
    batch_size: int = Field(64, ge=2)
    warmup_iters: int = Field(100, ge=0)
    joint_iters: int = Field(500, ge=0)
    lr: float = Field(2e-4, gt=0.0)
    arch_lr: float = Field(0.1, gt=0.0)
    lr_warmup: int = Field(100, ge=0)
    weight_decay: float = Field(0.0, ge=0.0)
    predictor_init_bias: float = 2.0
    predictor_init_scale: float = Field(1.0, ge=0.0)
    kmeans_batches: int = Field(10, ge=1)
    kmeans_restarts: int = Field(10, ge=1)
    binarize_threshold: float = Field(0.5, gt=0.0, lt=1.0)
    pretrain_iters: int = Field(8000, ge=0)
    pretrain_lr: float = Field(3e-3, gt=0.0)
    contrastive_sign_as_printed: bool = False
    use_ot: bool = True


class FinetuneConfig(_Strict):
    alpha_ddpm: float = Field(1e-4, ge=0.0)
    alpha_distill: float = Field(1.0, ge=0.0)
    iters: int = Field(1000, ge=0)
    lr: float = Field(1e-3, gt=0.0)
    batch_size: int = Field(64, ge=1)

    @model_validator(mode="after")
    def _weights(self):
        if self.alpha_ddpm == 0 and self.alpha_distill == 0:
            raise ValueError("alpha_ddpm and alpha_distill cannot both be zero")
        return self


class EvalConfig(_Strict):
    noise_draws: int = Field(4, ge=1)
    mmd_bandwidth: float = 0.0
    sample_draws: int = Field(4, ge=1)


class RunConfig(_Strict):
    seed: int = 0
    variant: Literal["full", "no_ot", "no_distill", "no_contrastive", "uni_arch"] = "full"
    corpus: CorpusConfig = CorpusConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    model: ModelConfig = ModelConfig()
    pruning: PruningConfig = PruningConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    eval: EvalConfig = EvalConfig()
    corpus_dir: str | None = None

    def config_hash(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, variant: str | None = None, experts: int | None = None) -> "RunConfig":
        data = self.model_dump()
        if seed is not None:
            data["seed"] = seed
            data["corpus"]["seed"] = seed
        if variant is not None:
            data["variant"] = variant
        if experts is not None:
            data["pruning"]["N"] = experts
        return RunConfig.model_validate(data)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.model_validate(json.load(fh))


def json_schema() -> dict:
    return RunConfig.model_json_schema()
