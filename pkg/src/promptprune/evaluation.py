"""Evaluation: budget adherence, routing statistics, held-out losses and a toy MMD."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.spatial.distance import cdist, pdist

from .config import EvalConfig
from .corpus import Corpus
from .diffusion import NoiseSchedule, ddpm_loss, make_batch, sample
from .model import MaskSet, PrunableSpec, ToyDenoiser, block_macs, estimate_macs
from .numerics import RngStream
from .router import RouteTable


def assignment_stats(routes: RouteTable, N: int) -> tuple[float, np.ndarray]:
    """Usage shares ``B_i / B`` and their entropy (natural log, 0·log 0 = 0)."""
    if len(routes) == 0:
        raise ValueError("assignment_stats needs at least one routed prompt")
    shares = np.bincount(routes.assignments, minlength=N) / len(routes)
    nz = shares[shares > 0]
    return float(-(nz * np.log(nz)).sum()) + 0.0, shares


def routing_consistency(routes: RouteTable, labels) -> tuple[np.ndarray, float]:
    """Per-cluster share of prompts sent to that cluster's most used expert.

    Clusters absent from ``labels`` get NaN and are left out of the mean.
    """
    labels = np.asarray(labels)
    if len(labels) != len(routes):
        raise ValueError(f"{len(labels)} labels for {len(routes)} routed prompts")
    K = int(labels.max()) + 1 if len(labels) else 0
    agree = np.full(K, np.nan)
    for c in range(K):
        sel = routes.assignments[labels == c]
        if len(sel):
            agree[c] = np.bincount(sel).max() / len(sel)
    present = agree[~np.isnan(agree)]
    return agree, float(present.mean()) if len(present) else float("nan")


@dataclass
class BudgetReport:
    fractions: np.ndarray  # per expert, T(a_i) / T_full
    block_names: list[str]
    block_ratios: np.ndarray  # (N, blocks) retained MACs / full block MACs
    shares: np.ndarray
    usage_weighted: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["expert", *self.block_names, "total"])
            for i, row in enumerate(self.block_ratios):
                w.writerow([i, *(repr(float(r)) for r in row), repr(float(self.fractions[i]))])


def budget_report(masks: list[MaskSet], spec: PrunableSpec, routes: RouteTable) -> BudgetReport:
    """Per-expert and per-block retained MACs of hard masks, plus the usage-weighted average."""
    full = spec.block_full_macs()
    names = [b.name for b in spec.blocks]
    fractions, ratios = [], []
    for m in masks:
        per_block = block_macs(spec, m)
        ratios.append([float(per_block[n]) / full[n] for n in names])
        fractions.append(float(estimate_macs(spec, m)) / spec.full_macs)
    _, shares = assignment_stats(routes, len(masks))
    fractions = np.asarray(fractions)
    return BudgetReport(fractions, names, np.asarray(ratios), shares, float((shares * fractions).sum()))


def median_bandwidth(real: np.ndarray) -> float:
    d = pdist(real)
    h = float(np.median(d)) if len(d) else 0.0
    if h <= 0:
        raise ValueError("median pairwise distance is zero; pass an explicit bandwidth")
    return h


def toy_mmd(gen, real, bandwidth: float = 0.0, unbiased: bool = True) -> float:
    """Squared MMD with kernel ``exp(-|a-b|^2 / 2h^2)``.

    ``bandwidth <= 0`` uses the median pairwise distance of ``real``. The
    unbiased estimator drops the within-set diagonals and needs at least two
    items per set.
    """
    X = np.asarray(torch.as_tensor(gen).detach().numpy() if torch.is_tensor(gen) else gen, dtype=np.float64)
    Y = np.asarray(torch.as_tensor(real).detach().numpy() if torch.is_tensor(real) else real, dtype=np.float64)
    X, Y = X.reshape(len(X), -1), Y.reshape(len(Y), -1)
    m, n = len(X), len(Y)
    if m == 0 or n == 0:
        raise ValueError("toy_mmd needs two nonempty sets")
    if unbiased and (m < 2 or n < 2):
        raise ValueError("unbiased MMD needs at least 2 items per set")
    h = bandwidth if bandwidth > 0 else median_bandwidth(Y)
    scale = -1.0 / (2.0 * h * h)
    kxx = np.exp(scale * cdist(X, X, "sqeuclidean"))
    kyy = np.exp(scale * cdist(Y, Y, "sqeuclidean"))
    kxy = np.exp(scale * cdist(X, Y, "sqeuclidean"))
    if unbiased:
        xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    else:
        xx, yy = kxx.mean(), kyy.mean()
    return float(xx + yy - 2.0 * kxy.mean())


@torch.no_grad()
def heldout_losses(
    model: ToyDenoiser,
    masks: MaskSet | None,
    corpus: Corpus,
    idx: np.ndarray,
    sched: NoiseSchedule,
    rng: RngStream,
    draws: int,
) -> np.ndarray:
    """Per-item DDPM loss averaged over ``draws`` fixed (t, eps) draws."""
    if len(idx) == 0:
        return np.zeros(0)
    total = np.zeros(len(idx))
    for k in range(draws):
        b = make_batch(corpus.data[idx], corpus.embeddings[idx], corpus.prompt_ids[idx], corpus.labels[idx],
                       sched, rng.child("draw", k))
        total += ddpm_loss(model, masks, b, reduce=False).numpy()
    return total / draws


def _none_if_nan(values) -> list:
    return [None if (v is None or (isinstance(v, float) and math.isnan(v))) else float(v) for v in values]


@dataclass
class EvalReport:
    variant: str
    N: int
    expert_mac_fractions: list
    usage_counts: list
    usage_shares: list
    usage_weighted_mac_fraction: float
    assignment_entropy: float
    modal_agreement: list
    modal_agreement_mean: float
    heldout_loss_before: list
    heldout_loss_after: list
    pooled_loss_before: float
    pooled_loss_after: float
    mmd_per_expert: list
    mmd_pooled: float
    block_names: list
    block_ratios: list

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def _bandwidth(cfg: EvalConfig, real: np.ndarray) -> float:
    """One kernel width for every MMD in a report: the configured one, else the pooled median."""
    return cfg.mmd_bandwidth if cfg.mmd_bandwidth > 0 else median_bandwidth(real)


@torch.no_grad()
def evaluate(
    result,
    experts,
    corpus: Corpus,
    sched: NoiseSchedule,
    cfg: EvalConfig,
    rng: RngStream,
) -> tuple[EvalReport, BudgetReport]:
    """Score a pruned run (and its fine-tuned experts) on the held-out split.

    Every held-out prompt goes to its routed expert. Loss draws and sampler
    noise are keyed by prompt id, so two runs on the same corpus see the same
    noise whatever their routing. Each prompt is sampled ``sample_draws``
    times; all MMDs share the pooled real-data bandwidth.
    """
    held = corpus.heldout_idx
    routes = result.route(corpus.embeddings[held])
    N = result.N
    entropy, shares = assignment_stats(routes, N)
    agree, agree_mean = routing_consistency(routes, corpus.labels[held])
    budget = budget_report(result.masks, result.spec, routes)

    before_item = np.zeros(len(held))
    after_item = np.zeros(len(held))
    draws = cfg.sample_draws
    gen = np.zeros((draws, len(held), result.spec.data_dim))
    before, after, mmds = [], [], []
    for i in range(N):
        local = routes.members(i)
        if len(local) == 0:
            before.append(None)
            after.append(None)
            mmds.append(None)
            continue
        idx = held[local]
        b = heldout_losses(result.model, result.masks[i], corpus, idx, sched, rng.child("loss"), cfg.noise_draws)
        a = heldout_losses(experts.models[i], result.masks[i], corpus, idx, sched, rng.child("loss"), cfg.noise_draws)
        before_item[local], after_item[local] = b, a
        before.append(float(b.mean()))
        after.append(float(a.mean()))
        for k in range(draws):
            x = sample(experts.models[i], result.masks[i], corpus.embeddings[idx], sched, rng.child("sample", k),
                       row_keys=corpus.prompt_ids[idx])
            gen[k, local] = x.numpy()
        mine = gen[:, local].reshape(-1, gen.shape[-1])
        mmds.append(toy_mmd(mine, corpus.data[idx], _bandwidth(cfg, corpus.data[held])) if len(idx) >= 2 else None)

    report = EvalReport(
        variant=result.variant,
        N=N,
        expert_mac_fractions=[float(f) for f in budget.fractions],
        usage_counts=[int(c) for c in routes.counts],
        usage_shares=[float(s) for s in shares],
        usage_weighted_mac_fraction=budget.usage_weighted,
        assignment_entropy=entropy,
        modal_agreement=_none_if_nan(agree),
        modal_agreement_mean=agree_mean,
        heldout_loss_before=before,
        heldout_loss_after=after,
        pooled_loss_before=float(before_item.mean()),
        pooled_loss_after=float(after_item.mean()),
        mmd_per_expert=mmds,
        mmd_pooled=toy_mmd(gen.reshape(-1, gen.shape[-1]), corpus.data[held], _bandwidth(cfg, corpus.data[held])),
        block_names=list(budget.block_names),
        block_ratios=[[float(r) for r in row] for row in budget.block_ratios],
    )
    return report, budget
