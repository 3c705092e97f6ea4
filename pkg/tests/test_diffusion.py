import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from promptprune.diffusion import (
    NoiseSchedule,
    ScheduleError,
    ddpm_loss,
    forward_noise,
    make_batch,
    make_schedule,
    sample,
)
from promptprune.model import MaskSet
from promptprune.numerics import RngStream, grad_check

from conftest import reference_forward, t64, tiny_spec


class Stub(torch.nn.Module):
    """Denoiser stand-in with a fixed output rule."""

    def __init__(self, dim, fn):
        super().__init__()
        self.spec = tiny_spec(data_dim=dim)
        self.fn = fn

    def forward(self, xt, z, t, masks=None):
        return self.fn(xt, t), []


def _schedule(betas):
    beta = np.asarray(betas, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(T=len(beta), beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def test_schedule_examples():
    s = make_schedule(2, "linear", 0.1, 0.2)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72], atol=1e-15)
    d = make_schedule()
    assert d.alpha_bar[0] == 1 - d.beta[0]
    # independent product, computed separately: 2.13997e-05
    assert d.alpha_bar[-1] <= 0.01
    assert d.alpha_bar[-1] == pytest.approx(2.13997e-05, rel=1e-4)
    np.testing.assert_array_equal(s.sigma2, s.beta)


@given(st.integers(2, 300), st.floats(1e-5, 0.05), st.floats(0.0, 0.5))
def test_schedule_invariants(T, b0, extra):
    s = make_schedule(T, "linear", b0, min(b0 + extra, 0.99))
    assert ((s.beta > 0) & (s.beta < 1)).all()
    assert (np.diff(s.alpha_bar) < 0).all()
    running = 1.0
    for t in range(T):
        running *= s.alpha[t]
        assert abs(s.alpha_bar[t] - running) <= 1e-12


@pytest.mark.parametrize("args", [(1, "linear", 0.1, 0.2), (10, "linear", 0.0, 0.2), (10, "linear", 0.3, 0.2),
                                  (10, "linear", 0.1, 1.0), (10, "cosine", 0.1, 0.2)])
def test_schedule_errors(args):
    with pytest.raises(ScheduleError):
        make_schedule(*args)


def test_forward_noise_examples():
    s = _schedule([0.75, 0.5])  # abar_1 = 0.25
    x = forward_noise(t64([2.0, 0.0]), 1, t64([0.0, 2.0]), s)
    np.testing.assert_allclose(x.numpy(), [1.0, 1.7320508075688772], atol=1e-12)
    ones = _schedule([1e-300, 0.5])
    np.testing.assert_allclose(forward_noise(t64([3.0, -1.0]), 1, t64([5.0, 5.0]), ones).numpy(), [3.0, -1.0])
    with pytest.raises(ScheduleError):
        forward_noise(t64([1.0]), 3, t64([1.0]), s)
    with pytest.raises(ScheduleError):
        forward_noise(t64([1.0]), 0, t64([1.0]), s)


def test_forward_noise_pure_noise_limit():
    s = _schedule([0.5, 1.0 - 1e-300])
    assert s.alpha_bar[1] < 1e-299
    np.testing.assert_allclose(forward_noise(t64([3.0, 4.0]), 2, t64([0.1, 0.2]), s).numpy(), [0.1, 0.2])


def test_forward_noise_energy():
    s = make_schedule()
    g = np.random.default_rng(0)
    x0 = g.standard_normal(16)
    t = 40
    eps = torch.from_numpy(g.standard_normal((50000, 16)))
    xt = forward_noise(t64(np.tile(x0, (50000, 1))), t, eps, s)
    ab = s.alpha_bar[t - 1]
    expected = ab * (x0 ** 2).sum() + (1 - ab) * 16
    assert (xt ** 2).sum(1).mean().item() == pytest.approx(expected, rel=0.02)


def _batch(spec, n=2, seed=0):
    g = np.random.default_rng(seed)
    return make_batch(g.standard_normal((n, spec.data_dim)), g.standard_normal((n, spec.cond_dim)),
                      np.arange(n), np.zeros(n, dtype=int), make_schedule(10), RngStream(seed))


def test_ddpm_loss_stub_cases(spec):
    b = _batch(spec, 8)
    perfect = Stub(spec.data_dim, lambda xt, t: b.eps)
    assert ddpm_loss(perfect, None, b).item() == 0.0
    unit = b.subset(np.arange(8))
    unit.eps = torch.ones_like(unit.eps)
    zero = Stub(spec.data_dim, lambda xt, t: torch.zeros_like(xt))
    assert ddpm_loss(zero, None, unit).item() == 1.0


def test_ddpm_loss_matches_reference(spec, model):
    b = _batch(spec, 2, seed=4)
    mv = np.random.default_rng(9).uniform(0.1, 0.9, spec.D)
    masks = MaskSet.from_vector(spec, t64(mv))
    out, _ = reference_forward(model, mv, b.xt.numpy(), b.z.numpy(), b.t.numpy())
    ref = ((out - b.eps.numpy()) ** 2).mean()
    assert ddpm_loss(model, masks, b).item() == pytest.approx(ref, abs=1e-13)


def test_ddpm_loss_shape_error_names_block(spec, model):
    b = _batch(spec, 2)
    bad = MaskSet(v=[torch.ones(2), torch.ones(3), torch.ones(2), torch.ones(2)], u=torch.ones(4))
    with pytest.raises(ValueError, match="E2"):
        ddpm_loss(model, bad, b)
    with pytest.raises(ValueError):
        ddpm_loss(model, None, b.subset([]))


def test_ddpm_loss_gradcheck(spec, model):
    b = _batch(spec, 3, seed=1)
    code = t64(np.random.default_rng(2).uniform(0.2, 0.8, spec.D)).requires_grad_(True)
    params = {"code": code, "w1.E1": model.w1["E1"], "w2.D1": model.w2["D1"], "in_w": model.in_w}
    rep = grad_check(lambda: ddpm_loss(model, MaskSet.from_vector(spec, code), b), params, tol=1e-4)
    assert rep.passed, str(rep)


def test_make_batch_keyed_by_prompt_id(spec):
    g = np.random.default_rng(0)
    x, z = g.standard_normal((5, 4)), g.standard_normal((5, 3))
    s = make_schedule(10)
    a = make_batch(x, z, np.array([10, 11, 12, 13, 14]), np.zeros(5, int), s, RngStream(1))
    perm = np.array([3, 1, 4, 0, 2])
    b = make_batch(x[perm], z[perm], np.array([10, 11, 12, 13, 14])[perm], np.zeros(5, int), s, RngStream(1))
    assert torch.equal(a.eps[perm], b.eps)
    assert torch.equal(a.t[perm], b.t)
    recomputed = forward_noise(a.x0, a.t.numpy(), a.eps, s)
    assert torch.equal(recomputed, a.xt)


def test_sample_single_step_closed_form():
    s = _schedule([0.3])
    zero = Stub(4, lambda xt, t: torch.zeros_like(xt))
    x1 = t64([[1.0, -2.0, 0.5, 3.0]])
    out = sample(zero, None, torch.zeros(1, 3), s, RngStream(0), x_T=x1)
    np.testing.assert_allclose(out.numpy(), x1.numpy() / math.sqrt(0.7), atol=1e-15)


def test_sample_inverts_with_oracle_eps():
    s = make_schedule(2, "linear", 0.1, 0.2)
    x0 = t64([[0.4, -1.0, 2.0, 0.1]])
    eps = t64([[0.3, 0.2, -0.5, 1.0]])
    x2 = math.sqrt(s.alpha_bar[1]) * x0 + math.sqrt(1 - s.alpha_bar[1]) * eps

    def oracle(xt, t):
        # the exact noise that maps x0 onto the current state
        ab = s.alpha_bar[int(t[0]) - 1]
        return (xt - math.sqrt(ab) * x0) / math.sqrt(1 - ab)

    assert torch.allclose(oracle(x2, torch.tensor([2])), eps, atol=1e-14)
    got = sample(Stub(4, oracle), None, torch.zeros(1, 3), s, RngStream(0), x_T=x2)
    assert np.abs(got.numpy() - x0.numpy()).max() <= 1e-6


def test_sample_deterministic_and_row_independent(spec, model):
    s = make_schedule(10)
    z = np.random.default_rng(0).standard_normal((3, spec.cond_dim))
    a = sample(model, None, z, s, RngStream(5), row_keys=[7, 8, 9])
    b = sample(model, None, z, s, RngStream(5), row_keys=[7, 8, 9])
    assert torch.equal(a, b)
    c = sample(model, None, z[1:2], s, RngStream(5), row_keys=[8])
    assert torch.allclose(c[0], a[1], atol=1e-12)
