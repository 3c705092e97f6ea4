"""Pruning (warm-up + joint router/code training) and per-expert fine-tuning."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import FinetuneConfig, ModelConfig, PruningConfig
from .corpus import Corpus
from .diffusion import Batch, NoiseSchedule, ddpm_loss, make_batch
from .model import MaskSet, PrunableSpec, ToyDenoiser, binarize, build_toy_unet, default_blocks, estimate_macs
from .numerics import DTYPE, NonFiniteError, RngStream, check_finite
from .objectives import (
    finetune_objective,
    pruning_objective,
    resource_loss,
    teacher_forward,
    warmup_objective,
)
from .objectives import per_sample_terms
from .router import (
    ArchPredictor,
    Codebook,
    RouteTable,
    gumbel_sigmoid,
    init_codes_kmeans,
    route_inference_batch,
    route_pruning,
    sinkhorn_assign,
)

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_ot", "no_distill", "no_contrastive", "uni_arch")


class TrainingDivergence(RuntimeError):
    def __init__(self, phase: str, iteration: int, term: str):
        self.phase, self.iteration, self.term = phase, iteration, term
        super().__init__(f"non-finite {term!r} at {phase} iteration {iteration}")


def spec_for(model_cfg: ModelConfig, data_dim: int, d_z: int) -> PrunableSpec:
    return PrunableSpec(
        data_dim=data_dim,
        model_dim=model_cfg.model_dim,
        cond_dim=d_z,
        time_dim=model_cfg.time_dim,
        blocks=default_blocks(model_cfg.hidden),
        output_skip=model_cfg.output_skip,
    )


@dataclass
class PruningResult:
    spec: PrunableSpec
    teacher: ToyDenoiser
    model: ToyDenoiser
    predictor: ArchPredictor | None
    codes: torch.Tensor
    masks: list[MaskSet]
    mac_fractions: np.ndarray
    log: list[dict] = field(default_factory=list)
    variant: str = "full"

    @property
    def N(self) -> int:
        return self.codes.shape[0]

    def route(self, z: np.ndarray | torch.Tensor) -> RouteTable:
        """Post-pruning routing: cosine argmax between e = f(z) and the codes."""
        z = torch.as_tensor(np.asarray(z, dtype=np.float64))
        if self.predictor is None:
            return RouteTable(assignments=np.zeros(len(z), dtype=np.int64), N=self.N, cosines=np.ones(len(z)))
        with torch.no_grad():
            E = self.predictor(z)
        return route_inference_batch(E, self.codes)


@dataclass
class ExpertSet:
    masks: list[MaskSet]
    models: list[ToyDenoiser]
    trained: np.ndarray
    routes: RouteTable


class _Data:
    """Batch factory over one split of the corpus; every draw is keyed by (phase, iteration)."""

    def __init__(self, corpus: Corpus, idx: np.ndarray, sched: NoiseSchedule, rng: RngStream):
        self.x = corpus.data
        self.z = corpus.embeddings
        self.labels = corpus.labels
        self.pids = corpus.prompt_ids
        self.idx = np.asarray(idx)
        self.sched = sched
        self.rng = rng

    def batch(self, phase: str, it: int, size: int) -> Batch:
        gen = self.rng.child("batch", phase, it).generator()
        pick = gen.choice(self.idx, size=size, replace=len(self.idx) < size)
        pick = np.sort(pick)
        return make_batch(self.x[pick], self.z[pick], self.pids[pick], self.labels[pick],
                          self.sched, self.rng.child("noise", phase, it))


def _set_lr(opt: torch.optim.Optimizer, step: int, warmup: int) -> None:
    """Linear warm-up from ``base_lr / warmup`` to ``base_lr`` for every group."""
    scale = min(1.0, (step + 1) / warmup) if warmup > 0 else 1.0
    for group in opt.param_groups:
        group["lr"] = group["base_lr"] * scale


def pretrain_teacher(
    corpus: Corpus,
    spec: PrunableSpec,
    sched: NoiseSchedule,
    cfg: PruningConfig,
    rng: RngStream,
) -> ToyDenoiser:
    """Train the dense denoiser that pruning starts from and distills toward."""
    model = build_toy_unet(spec, rng.child("init"))
    data = _Data(corpus, corpus.train_idx, sched, rng)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.pretrain_lr, weight_decay=0.0)
    sched_lr = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / 100) * max(0.1, 1.0 - s / max(cfg.pretrain_iters, 1))
    )
    for it in range(cfg.pretrain_iters):
        batch = data.batch("pretrain", it, cfg.batch_size)
        loss = ddpm_loss(model, None, batch)
        try:
            check_finite(loss, "ddpm")
        except NonFiniteError as err:
            raise TrainingDivergence("pretrain", it, err.term) from err
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched_lr.step()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _frozen_copy(model: ToyDenoiser) -> ToyDenoiser:
    teacher = copy.deepcopy(model)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def _trainable_copy(model: ToyDenoiser) -> ToyDenoiser:
    student = copy.deepcopy(model)
    for p in student.parameters():
        p.requires_grad_(True)
    return student


def _step(opt, total: torch.Tensor, step: int, warmup: int) -> None:
    _set_lr(opt, step, warmup)
    opt.zero_grad()
    total.backward()
    opt.step()


def _log_row(phase: str, it: int, parts: dict) -> dict:
    row = {"phase": phase, "iter": it}
    for key in ("ddpm", "distill", "resource", "contrastive", "avg_mac_fraction", "total"):
        row[key] = parts[key]
    return row


def _binarized(spec: PrunableSpec, codes: torch.Tensor, threshold: float) -> tuple[list[MaskSet], np.ndarray]:
    masks = [binarize(codes[i], spec, threshold) for i in range(codes.shape[0])]
    fracs = np.array([float(estimate_macs(spec, m)) / spec.full_macs for m in masks])
    return masks, fracs


def prune(
    corpus: Corpus,
    cfg: PruningConfig,
    rng: RngStream,
    sched: NoiseSchedule,
    spec: PrunableSpec,
    teacher: ToyDenoiser | None = None,
) -> PruningResult:
    """Warm-up on per-sample predicted architectures, then joint training with codes.

    The returned experts are the binarized codes. ``cfg.use_ot=False`` routes
    by nearest code (cosine) instead of the transport plan.
    """
    if teacher is None:
        teacher = pretrain_teacher(corpus, spec, sched, cfg, rng.child("pretrain"))
    model = _trainable_copy(teacher)
    predictor = ArchPredictor(corpus.embeddings.shape[1], spec.D, rng.child("predictor"),
                              cfg.predictor_init_bias, cfg.predictor_init_scale)
    data = _Data(corpus, corpus.train_idx, sched, rng)
    opt = torch.optim.AdamW(
        [{"params": list(model.parameters()), "base_lr": cfg.lr},
         {"params": list(predictor.parameters()), "base_lr": cfg.arch_lr}],
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )
    rows: list[dict] = []
    collected: list[np.ndarray] = []

    for it in range(cfg.warmup_iters):
        batch = data.batch("warmup", it, cfg.batch_size)
        try:
            total, parts = warmup_objective(batch, model, teacher, predictor, cfg, rng.child("gumbel", "warmup", it))
        except NonFiniteError as err:
            raise TrainingDivergence("warmup", it, err.term) from err
        _step(opt, total, it, cfg.lr_warmup)
        rows.append(_log_row("warmup", it, parts))
        if it >= cfg.warmup_iters - cfg.kmeans_batches:
            with torch.no_grad():
                collected.append(predictor(batch.z).numpy())

    if not collected:
        with torch.no_grad():
            for k in range(cfg.kmeans_batches):
                collected.append(predictor(data.batch("kmeans", k, cfg.batch_size).z).numpy())
    codebook = Codebook(init_codes_kmeans(np.concatenate(collected), cfg.N, rng.child("kmeans").stream,
                                          cfg.kmeans_restarts))
    opt.add_param_group({"params": [codebook.codes], "base_lr": cfg.arch_lr, "lr": cfg.arch_lr})

    for it in range(cfg.joint_iters):
        batch = data.batch("joint", it, cfg.batch_size)
        with torch.no_grad():
            E = predictor(batch.z)
        if cfg.use_ot:
            route = route_pruning(sinkhorn_assign(E, codebook.codes, cfg.eps_ot, cfg.sinkhorn_iters))
        else:
            route = route_inference_batch(E, codebook.codes)
        try:
            total, parts = pruning_objective(batch, route, codebook.codes, model, teacher, predictor, cfg,
                                             rng.child("gumbel", "joint", it))
        except NonFiniteError as err:
            raise TrainingDivergence("joint", it, err.term) from err
        _step(opt, total, cfg.warmup_iters + it, cfg.lr_warmup)
        row = _log_row("joint", it, parts)
        row["expert_counts"] = [int(c) for c in route.counts]
        rows.append(row)

    codes = codebook.codes.detach().clone()
    masks, fracs = _binarized(spec, codes, cfg.binarize_threshold)
    for p in list(model.parameters()) + list(predictor.parameters()):
        p.requires_grad_(False)
    variant = "full" if cfg.use_ot else "no_ot"
    return PruningResult(spec, teacher, model, predictor, codes, masks, fracs, rows, variant)


def train_uni_arch(
    corpus: Corpus,
    cfg: PruningConfig,
    rng: RngStream,
    sched: NoiseSchedule,
    spec: PrunableSpec,
    teacher: ToyDenoiser | None = None,
) -> PruningResult:
    """Single static sub-network: one free logit vector, no router, same iteration budget."""
    if teacher is None:
        teacher = pretrain_teacher(corpus, spec, sched, cfg, rng.child("pretrain"))
    model = _trainable_copy(teacher)
    logits = torch.nn.Parameter(torch.full((spec.D,), float(cfg.predictor_init_bias), dtype=DTYPE))
    data = _Data(corpus, corpus.train_idx, sched, rng)
    opt = torch.optim.AdamW(
        [{"params": list(model.parameters()), "base_lr": cfg.lr}, {"params": [logits], "base_lr": cfg.arch_lr}],
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )
    rows = []
    for it in range(cfg.warmup_iters + cfg.joint_iters):
        batch = data.batch("uni", it, cfg.batch_size)
        soft = gumbel_sigmoid(logits, cfg.gamma, rng.child("gumbel", "uni", it))
        masks = MaskSet.from_vector(spec, soft)
        ddpm, distill = per_sample_terms(model, masks, batch, teacher_forward(teacher, batch))
        frac = estimate_macs(spec, masks) / spec.full_macs
        parts_t = {"ddpm": ddpm.mean(), "distill": distill.mean(),
                   "resource": resource_loss(frac, cfg.target_macs)}
        total = parts_t["ddpm"] + cfg.lambda_distill * parts_t["distill"] + cfg.lambda_res * parts_t["resource"]
        try:
            for name, v in parts_t.items():
                check_finite(v, name)
        except NonFiniteError as err:
            raise TrainingDivergence("uni", it, err.term) from err
        _step(opt, total, it, cfg.lr_warmup)
        parts = {k: float(v.detach()) for k, v in parts_t.items()}
        parts.update(contrastive=0.0, avg_mac_fraction=float(frac.detach()), total=float(total.detach()))
        rows.append(_log_row("uni", it, parts))
    codes = logits.detach().clone().unsqueeze(0)
    masks, fracs = _binarized(spec, codes, cfg.binarize_threshold)
    for p in model.parameters():
        p.requires_grad_(False)
    return PruningResult(spec, teacher, model, None, codes, masks, fracs, rows, "uni_arch")


def ablation_run(
    variant: str,
    corpus: Corpus,
    cfg: PruningConfig,
    rng: RngStream,
    sched: NoiseSchedule,
    spec: PrunableSpec,
    teacher: ToyDenoiser | None = None,
) -> PruningResult:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "uni_arch":
        return train_uni_arch(corpus, cfg, rng, sched, spec, teacher)
    overrides = {
        "full": {},
        "no_ot": {"use_ot": False},
        "no_distill": {"lambda_distill": 0.0},
        "no_contrastive": {"lambda_cont": 0.0},
    }[variant]
    result = prune(corpus, cfg.model_copy(update=overrides), rng, sched, spec, teacher)
    result.variant = variant
    return result


def finetune(
    result: PruningResult,
    corpus: Corpus,
    cfg: FinetuneConfig,
    rng: RngStream,
    sched: NoiseSchedule,
) -> ExpertSet:
    """Fine-tune an independent copy of the pruned model per nonempty expert on its routed prompts."""
    train = corpus.train_idx
    routes_local = result.route(corpus.embeddings[train])
    routes = RouteTable(assignments=routes_local.assignments, N=result.N, cosines=routes_local.cosines)
    models, trained = [], np.zeros(result.N, dtype=bool)
    for i in range(result.N):
        student = _trainable_copy(result.model)
        members = train[routes.members(i)]
        if len(members) and cfg.iters > 0:
            data = _Data(corpus, members, sched, rng.child("expert", i))
            opt = torch.optim.AdamW(student.parameters(), lr=cfg.lr, weight_decay=0.0)
            for it in range(cfg.iters):
                batch = data.batch("finetune", it, cfg.batch_size)
                loss = finetune_objective(batch, result.masks[i], student, result.teacher, cfg)
                try:
                    check_finite(loss, "finetune")
                except NonFiniteError as err:
                    raise TrainingDivergence(f"finetune[{i}]", it, err.term) from err
                opt.zero_grad()
                loss.backward()
                opt.step()
            trained[i] = True
        elif len(members) == 0:
            log.warning("expert %d received no prompts; left untrained", i)
        for p in student.parameters():
            p.requires_grad_(False)
        models.append(student)
    return ExpertSet(masks=list(result.masks), models=models, trained=trained, routes=routes)
