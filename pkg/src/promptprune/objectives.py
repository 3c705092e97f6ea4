"""Loss terms for pruning and fine-tuning and their composition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import FinetuneConfig, PruningConfig
from .diffusion import Batch, per_sample_mse
from .model import MaskSet, SpecError, ToyDenoiser, estimate_macs
from .numerics import RngStream, check_finite, cosine_matrix
from .router import ArchPredictor, RouteTable, gumbel_sigmoid

LOG_CLAMP = 1e-12


def _softmax_similarity(x: torch.Tensor, tau: float) -> torch.Tensor:
    return torch.softmax(cosine_matrix(x, x) / tau, dim=1)


def contrastive_loss(Z: torch.Tensor, Eprime: torch.Tensor, tau: float, sign_as_printed: bool = False) -> torch.Tensor:
    """Soft binary cross-entropy between prompt and architecture similarity rows.

    ``r`` (from prompt embeddings) is the target for ``s`` (from the relaxed
    architecture vectors); both are row softmaxes of cosine similarity over
    the whole batch, diagonal included. ``sign_as_printed`` returns the
    un-negated bracket instead.
    """
    B = Z.shape[0]
    if B < 2:
        raise ValueError("contrastive_loss needs a batch of at least 2")
    if Eprime.shape[0] != B:
        raise SpecError(f"{B} prompt embeddings but {Eprime.shape[0]} architecture vectors")
    r = _softmax_similarity(Z.detach(), tau)
    s = _softmax_similarity(Eprime, tau).clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
    bracket = (r * torch.log(s) + (1.0 - r) * torch.log(1.0 - s)).sum() / B**2
    return bracket if sign_as_printed else -bracket


def resource_loss(avg_macs: torch.Tensor, target) -> torch.Tensor:
    """``log(max(x, y) / min(x, y))`` written as ``|log x - log y|``."""
    x = torch.as_tensor(avg_macs, dtype=torch.float64)
    y = torch.as_tensor(target, dtype=torch.float64)
    if float(x.detach().min()) <= 0 or float(y.detach().min()) <= 0:
        raise ValueError(f"resource_loss needs positive inputs, got {float(x)}, {float(y)}")
    return torch.abs(torch.log(x) - torch.log(y))


@dataclass
class DistillPair:
    teacher_out: torch.Tensor
    student_out: torch.Tensor
    teacher_blocks: list[torch.Tensor]
    student_blocks: list[torch.Tensor]


def distillation_loss(pair: DistillPair, reduce: bool = True) -> torch.Tensor:
    """Output-level plus block-level squared error (per-element mean), teacher detached."""
    if len(pair.teacher_blocks) != len(pair.student_blocks):
        raise SpecError(
            f"teacher has {len(pair.teacher_blocks)} blocks, student has {len(pair.student_blocks)}"
        )
    per = per_sample_mse(pair.student_out, pair.teacher_out.detach())
    for tb, sb in zip(pair.teacher_blocks, pair.student_blocks):
        per = per + per_sample_mse(sb, tb.detach())
    return per.mean() if reduce else per


@torch.no_grad()
def teacher_forward(teacher: ToyDenoiser, batch: Batch):
    return teacher(batch.xt, batch.z, batch.t, None)


def per_sample_terms(model: ToyDenoiser, masks: MaskSet, batch: Batch, teacher_out) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample DDPM and distillation losses for a (possibly per-sample) mask set."""
    eps_hat, blocks = model(batch.xt, batch.z, batch.t, masks)
    ddpm = per_sample_mse(eps_hat, batch.eps)
    t_out, t_blocks = teacher_out
    distill = distillation_loss(DistillPair(t_out, eps_hat, t_blocks, blocks), reduce=False)
    return ddpm, distill


def grouped_mean(values: torch.Tensor, groups: np.ndarray, N: int) -> torch.Tensor:
    """``(1/N') Σ_{i: B_i>0} (1/B_i) Σ_{j in i} values_j`` over nonempty groups."""
    counts = np.bincount(groups, minlength=N).astype(np.float64)
    weights = 1.0 / (counts[groups] * np.count_nonzero(counts))
    return (values * torch.from_numpy(weights)).sum()


def expert_masks(codes: torch.Tensor, spec, gamma: float, rng: RngStream | None) -> MaskSet:
    """Relaxed masks for every code (stacked (N, D)); code ``i`` uses noise stream ``("code", i)``."""
    rows = [gumbel_sigmoid(codes[i], gamma, None if rng is None else rng.child("code", i)) for i in range(codes.shape[0])]
    return MaskSet.from_vector(spec, torch.stack(rows))


def item_arch_vectors(E: torch.Tensor, prompt_ids, gamma: float, rng: RngStream | None) -> torch.Tensor:
    """Relaxed architecture vectors e' per item, noise keyed by prompt id."""
    rows = [gumbel_sigmoid(E[k], gamma, None if rng is None else rng.child("e", int(pid))) for k, pid in enumerate(prompt_ids)]
    return torch.stack(rows)


def _finish(parts: dict[str, torch.Tensor], cfg: PruningConfig) -> tuple[torch.Tensor, dict[str, float]]:
    total = parts["ddpm"] + cfg.lambda_distill * parts["distill"] + cfg.lambda_res * parts["resource"] + cfg.lambda_cont * parts["contrastive"]
    for name, value in parts.items():
        check_finite(value, name)
    logged = {k: float(v.detach()) for k, v in parts.items()}
    logged["total"] = float(total.detach())
    return total, logged


def pruning_objective(
    batch: Batch,
    route: RouteTable,
    codes: torch.Tensor,
    model: ToyDenoiser,
    teacher: ToyDenoiser,
    predictor: ArchPredictor | None,
    cfg: PruningConfig,
    rng: RngStream | None,
    teacher_out=None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Joint-phase objective: per-expert DDPM + distillation, budget and contrastive terms.

    Experts with no routed samples are skipped and the expert average runs
    over nonempty experts only. Gradients reach the codes through their
    relaxed masks and the predictor only through the contrastive term.
    """
    spec = model.spec
    if len(route) != len(batch):
        raise SpecError(f"route covers {len(route)} items, batch has {len(batch)}")
    N = codes.shape[0]
    masks = expert_masks(codes, spec, cfg.gamma, rng)
    per_sample = masks.select(torch.as_tensor(route.assignments))
    if teacher_out is None:
        teacher_out = teacher_forward(teacher, batch)
    ddpm, distill = per_sample_terms(model, per_sample, batch, teacher_out)

    shares = torch.from_numpy(route.counts / len(route))
    macs = estimate_macs(spec, masks) / spec.full_macs
    avg_frac = (shares * macs).sum()
    parts = {
        "ddpm": grouped_mean(ddpm, route.assignments, N),
        "distill": grouped_mean(distill, route.assignments, N),
        "resource": resource_loss(avg_frac, cfg.target_macs),
    }
    if predictor is not None and cfg.lambda_cont > 0:
        E = predictor(batch.z)
        Ep = item_arch_vectors(E, batch.prompt_ids, cfg.gamma, rng)
        parts["contrastive"] = contrastive_loss(batch.z, Ep, cfg.tau, cfg.contrastive_sign_as_printed)
    else:
        parts["contrastive"] = torch.zeros((), dtype=torch.float64)
    total, logged = _finish(parts, cfg)
    logged["avg_mac_fraction"] = float(avg_frac.detach())
    return total, logged


def warmup_objective(
    batch: Batch,
    model: ToyDenoiser,
    teacher: ToyDenoiser,
    predictor: ArchPredictor,
    cfg: PruningConfig,
    rng: RngStream | None,
    teacher_out=None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Warm-up objective: every sample is pruned by its own predicted architecture."""
    spec = model.spec
    E = predictor(batch.z)
    Ep = item_arch_vectors(E, batch.prompt_ids, cfg.gamma, rng)
    masks = MaskSet.from_vector(spec, Ep)
    if teacher_out is None:
        teacher_out = teacher_forward(teacher, batch)
    ddpm, distill = per_sample_terms(model, masks, batch, teacher_out)
    avg_frac = (estimate_macs(spec, masks) / spec.full_macs).mean()
    parts = {
        "ddpm": ddpm.mean(),
        "distill": distill.mean(),
        "resource": resource_loss(avg_frac, cfg.target_macs),
        "contrastive": (
            contrastive_loss(batch.z, Ep, cfg.tau, cfg.contrastive_sign_as_printed)
            if cfg.lambda_cont > 0
            else torch.zeros((), dtype=torch.float64)
        ),
    }
    total, logged = _finish(parts, cfg)
    logged["avg_mac_fraction"] = float(avg_frac.detach())
    return total, logged


def finetune_objective(
    batch: Batch,
    masks: MaskSet,
    model: ToyDenoiser,
    teacher: ToyDenoiser,
    cfg: FinetuneConfig,
    teacher_out=None,
) -> torch.Tensor:
    """``alpha_ddpm · L_DDPM + alpha_distill · L_distill`` for one expert's hard masks."""
    if teacher_out is None:
        teacher_out = teacher_forward(teacher, batch)
    ddpm, distill = per_sample_terms(model, masks, batch, teacher_out)
    return cfg.alpha_ddpm * ddpm.mean() + cfg.alpha_distill * distill.mean()
