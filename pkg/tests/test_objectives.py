import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from promptprune.config import FinetuneConfig, PruningConfig
from promptprune.diffusion import ddpm_loss, make_batch, make_schedule
from promptprune.model import MaskSet, SpecError, ToyDenoiser, binarize
from promptprune.numerics import RngStream, grad_check
from promptprune.objectives import (
    DistillPair,
    contrastive_loss,
    distillation_loss,
    expert_masks,
    finetune_objective,
    grouped_mean,
    pruning_objective,
    resource_loss,
    warmup_objective,
)
from promptprune.router import ArchPredictor, RouteTable

from conftest import reference_forward, t64, tiny_spec

LOG2 = math.log(2.0)


def _bce_entropy(r: np.ndarray) -> float:
    r = np.clip(r, 1e-300, 1.0)
    q = np.clip(1.0 - r, 1e-300, 1.0)
    return float(-(r * np.log(r) + (1 - r) * np.log(q)).sum() / r.shape[0] ** 2)


def _softmax_cos(x: np.ndarray, tau: float) -> np.ndarray:
    n = x / np.linalg.norm(x, axis=1, keepdims=True)
    logits = n @ n.T / tau
    logits -= logits.max(1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(1, keepdims=True)


# -- contrastive -------------------------------------------------------------

def test_contrastive_uniform_case():
    Z = t64([[1.0, 2.0], [1.0, 2.0]])
    E = t64([[0.3, 0.4, 0.5], [0.3, 0.4, 0.5]])
    assert contrastive_loss(Z, E, 0.03).item() == pytest.approx(LOG2, abs=1e-12)


def test_contrastive_orthogonal_prompts():
    Z = t64([[1.0, 0.0], [0.0, 1.0]])
    same = t64([[0.5, 0.5], [0.5, 0.5]])
    ortho = t64([[1.0, 0.0], [0.0, 1.0]])
    a = contrastive_loss(Z, same, 0.03).item()
    assert a == pytest.approx(LOG2, abs=1e-12)
    assert contrastive_loss(Z, ortho, 0.03).item() < a


def test_contrastive_minimum_at_r_equals_s():
    Z = t64(np.random.default_rng(0).uniform(0.1, 1, (5, 4)))
    r = _softmax_cos(Z.numpy(), 0.5)
    assert contrastive_loss(Z, Z.clone(), 0.5).item() == pytest.approx(_bce_entropy(r), abs=1e-12)


@given(st.integers(2, 6), st.integers(0, 10**6), st.sampled_from([0.03, 0.1, 1.0]))
def test_contrastive_cross_entropy_bound(B, seed, tau):
    g = np.random.default_rng(seed)
    Z, E = g.standard_normal((B, 3)), g.uniform(0.01, 1, (B, 5))
    loss = contrastive_loss(t64(Z), t64(E), tau).item()
    assert loss >= _bce_entropy(_softmax_cos(Z, tau)) - 1e-9


def test_contrastive_sign_switch_and_errors():
    Z, E = t64(np.eye(3)), t64(np.random.default_rng(0).uniform(0, 1, (3, 4)))
    assert contrastive_loss(Z, E, 0.1, sign_as_printed=True).item() == pytest.approx(-contrastive_loss(Z, E, 0.1).item())
    with pytest.raises(ValueError):
        contrastive_loss(Z[:1], E[:1], 0.1)
    with pytest.raises(SpecError):
        contrastive_loss(Z, E[:2], 0.1)


def test_contrastive_gradcheck():
    g = np.random.default_rng(1)
    Z = t64(g.standard_normal((4, 3)))
    E = t64(g.uniform(0.1, 0.9, (4, 5))).requires_grad_(True)
    rep = grad_check(lambda: contrastive_loss(Z, E, 0.03), {"Eprime": E}, tol=1e-4)
    assert rep.passed, str(rep)


# -- resource ----------------------------------------------------------------

def test_resource_examples():
    assert resource_loss(0.7, 0.7).item() == 0.0
    assert resource_loss(0.85, 1.0).item() == pytest.approx(0.16251892949777494, abs=1e-14)
    assert resource_loss(0.3, 0.9).item() == resource_loss(0.9, 0.3).item()
    for bad in ((0.0, 1.0), (1.0, -2.0)):
        with pytest.raises(ValueError):
            resource_loss(*bad)


@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(1e-2, 1e2))
def test_resource_properties(x, y, c):
    r = resource_loss(x, y).item()
    assert r >= 0
    assert r == pytest.approx(math.log(max(x, y) / min(x, y)), abs=1e-12)
    assert resource_loss(c * x, c * y).item() == pytest.approx(r, abs=1e-9)


def test_resource_gradcheck():
    x = t64([0.62]).requires_grad_(True)
    assert grad_check(lambda: resource_loss(x, 0.7).sum(), {"x": x}, tol=1e-4).passed


# -- distillation ------------------------------------------------------------

def test_distillation_examples():
    t = t64(np.random.default_rng(0).standard_normal((3, 4)))
    blocks = [t64(np.random.default_rng(k).standard_normal((3, 4))) for k in range(2)]
    assert distillation_loss(DistillPair(t, t.clone(), blocks, [b.clone() for b in blocks])).item() == 0.0
    assert distillation_loss(DistillPair(t, t + 1, blocks, [b.clone() for b in blocks])).item() == 1.0
    with pytest.raises(SpecError):
        distillation_loss(DistillPair(t, t, blocks, blocks[:1]))


def _batch(spec, n=8, seed=0, sched=None):
    g = np.random.default_rng(seed)
    return make_batch(g.standard_normal((n, spec.data_dim)), g.standard_normal((n, spec.cond_dim)),
                      np.arange(100, 100 + n), np.zeros(n, dtype=int), sched or make_schedule(20), RngStream(seed))


def test_distillation_matches_reference(spec):
    teacher = ToyDenoiser(spec, RngStream(1))
    student = ToyDenoiser(spec, RngStream(2))
    b = _batch(spec, 3)
    mv = np.random.default_rng(5).uniform(0, 1, spec.D)
    with torch.no_grad():
        t_out, t_blocks = teacher(b.xt, b.z, b.t)
        s_out, s_blocks = student(b.xt, b.z, b.t, MaskSet.from_vector(spec, t64(mv)))
    got = distillation_loss(DistillPair(t_out, s_out, t_blocks, s_blocks)).item()
    rt, rtb = reference_forward(teacher, None, b.xt.numpy(), b.z.numpy(), b.t.numpy())
    rs, rsb = reference_forward(student, mv, b.xt.numpy(), b.z.numpy(), b.t.numpy())
    ref = ((rs - rt) ** 2).mean() + sum(((x - y) ** 2).mean() for x, y in zip(rsb, rtb))
    assert got == pytest.approx(ref, abs=1e-12)


# -- grouping and composition ------------------------------------------------

def test_grouped_mean_skips_empty_groups():
    v = t64([1.0, 2.0, 3.0, 10.0])
    # groups {0: [1, 2, 3], 2: [10]}, expert 1 empty -> (2 + 10) / 2
    assert grouped_mean(v, np.array([0, 0, 0, 2]), 3).item() == pytest.approx(6.0)
    assert grouped_mean(v, np.zeros(4, dtype=int), 4).item() == pytest.approx(4.0)


class _Perfect(torch.nn.Module):
    def __init__(self, spec, batch):
        super().__init__()
        self.spec, self.batch = spec, batch

    def forward(self, xt, z, t, masks=None):
        return self.batch.eps.clone(), []


def test_pruning_objective_zero_weights_perfect_denoiser(spec):
    b = _batch(spec)
    stub = _Perfect(spec, b)
    cfg = PruningConfig(lambda_distill=0.0, lambda_res=0.0, lambda_cont=0.0, N=2)
    codes = t64(np.random.default_rng(0).standard_normal((2, spec.D)))
    route = RouteTable(np.array([0, 1] * 4), 2)
    total, parts = pruning_objective(b, route, codes, stub, stub, None, cfg, RngStream(0))
    assert total.item() == 0.0 and parts["ddpm"] == 0.0


def test_pruning_objective_single_expert(spec, model):
    b = _batch(spec)
    teacher = ToyDenoiser(spec, RngStream(7))
    cfg = PruningConfig(lambda_distill=0.0, lambda_res=0.0, lambda_cont=0.0, N=4)
    codes = t64(np.random.default_rng(0).standard_normal((4, spec.D)))
    route = RouteTable(np.full(8, 2), 4)
    rng = RngStream(4)
    total, _ = pruning_objective(b, route, codes, model, teacher, None, cfg, rng)
    masks = expert_masks(codes, spec, cfg.gamma, rng).select(torch.tensor(2))
    assert total.item() == pytest.approx(ddpm_loss(model, masks, b).item(), abs=1e-14)


def _setup(spec, N=2, B=8, seed=0):
    g = np.random.default_rng(seed)
    model = ToyDenoiser(spec, RngStream(seed + 1))
    teacher = ToyDenoiser(spec, RngStream(seed + 2))
    pred = ArchPredictor(spec.cond_dim, spec.D, RngStream(seed + 3), init_bias=0.5)
    codes = t64(g.normal(0, 1, (N, spec.D)))
    route = RouteTable(g.integers(0, N, B), N)
    return _batch(spec, B, seed), model, teacher, pred, codes, route


def test_pruning_objective_parts_sum(spec):
    b, model, teacher, pred, codes, route = _setup(spec)
    cfg = PruningConfig(N=2)
    total, parts = pruning_objective(b, route, codes, model, teacher, pred, cfg, RngStream(9))
    recomposed = parts["ddpm"] + 0.2 * parts["distill"] + 2.0 * parts["resource"] + 100.0 * parts["contrastive"]
    assert total.item() == pytest.approx(recomposed, abs=1e-10)
    assert set(parts) >= {"ddpm", "distill", "resource", "contrastive", "avg_mac_fraction", "total"}


def test_pruning_objective_permutation_invariant(spec):
    b, model, teacher, pred, codes, route = _setup(spec, seed=3)
    cfg = PruningConfig(N=2)
    a, _ = pruning_objective(b, route, codes, model, teacher, pred, cfg, RngStream(9))
    perm = np.random.default_rng(0).permutation(len(b))
    c, _ = pruning_objective(b.subset(perm), RouteTable(route.assignments[perm], 2), codes, model, teacher, pred,
                             cfg, RngStream(9))
    assert a.item() == pytest.approx(c.item(), abs=1e-12)


def test_pruning_objective_gradcheck(spec):
    b, model, teacher, pred, codes, route = _setup(spec, seed=5)
    codes.requires_grad_(True)
    cfg = PruningConfig(N=2)
    rng = RngStream(11)
    params = {"codes": codes, "eta.weight": pred.weight, "eta.bias": pred.bias}
    params.update({f"theta.{k}": p for k, p in model.named_parameters()})
    assert sum(p.numel() for p in params.values()) <= 1000
    rep = grad_check(lambda: pruning_objective(b, route, codes, model, teacher, pred, cfg, rng)[0], params, tol=1e-4)
    assert rep.passed, str(rep)


def test_warmup_objective_parts_sum(spec):
    b, model, teacher, pred, _, _ = _setup(spec)
    cfg = PruningConfig()
    total, parts = warmup_objective(b, model, teacher, pred, cfg, RngStream(2))
    recomposed = parts["ddpm"] + 0.2 * parts["distill"] + 2.0 * parts["resource"] + 100.0 * parts["contrastive"]
    assert total.item() == pytest.approx(recomposed, abs=1e-10)


def test_finetune_objective_cases(spec):
    b, model, teacher, _, codes, _ = _setup(spec)
    masks = binarize(codes[0], spec)
    ones = MaskSet.ones(spec)
    assert finetune_objective(b, ones, teacher, teacher, FinetuneConfig(alpha_ddpm=0.0)).item() == 0.0
    only_ddpm = finetune_objective(b, masks, model, teacher, FinetuneConfig(alpha_ddpm=3.0, alpha_distill=0.0))
    assert only_ddpm.item() == pytest.approx(3.0 * ddpm_loss(model, masks, b).item(), abs=1e-13)
    default = finetune_objective(b, masks, model, teacher, FinetuneConfig()).item()
    with torch.no_grad():
        t_out, t_blocks = teacher(b.xt, b.z, b.t)
        s_out, s_blocks = model(b.xt, b.z, b.t, masks)
    ref = 0.0001 * ddpm_loss(model, masks, b).item() + distillation_loss(DistillPair(t_out, s_out, t_blocks, s_blocks)).item()
    assert default == pytest.approx(ref, abs=1e-13)


def test_finetune_objective_gradcheck(spec):
    b, model, teacher, _, codes, _ = _setup(spec, seed=8)
    masks = binarize(codes[0], spec)
    params = dict(model.named_parameters())
    rep = grad_check(lambda: finetune_objective(b, masks, model, teacher, FinetuneConfig()), params, tol=1e-4)
    assert rep.passed, str(rep)
