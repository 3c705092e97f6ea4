import math

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from promptprune.model import PrunableSpec, ToyDenoiser, default_blocks
from promptprune.numerics import RngStream

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_spec(hidden: int = 2, **kw) -> PrunableSpec:
    """A few hundred parameters: small enough for exhaustive finite differences."""
    args = dict(data_dim=4, model_dim=4, cond_dim=3, time_dim=2, blocks=default_blocks(hidden))
    args.update(kw)
    return PrunableSpec(**args)


@pytest.fixture
def spec():
    return tiny_spec()


@pytest.fixture
def model(spec):
    return ToyDenoiser(spec, RngStream(3))


def _silu(x):
    return x / (1.0 + np.exp(-x))


def reference_forward(model: ToyDenoiser, mask_vec, xt, z, t):
    """Straight-line numpy re-implementation of the masked forward pass.

    ``mask_vec`` is a flat code-layout vector ``[v..., u...]`` (or None). Shares
    nothing with the torch implementation except the parameter values.
    """
    spec = model.spec
    P = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    xt = np.atleast_2d(np.asarray(xt, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = spec.time_dim // 2
    freqs = np.array([math.exp(-math.log(10000.0) * k / half) for k in range(half)])
    temb = np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=1)
    cond = np.concatenate([z, temb], axis=1)

    v, u = {}, {}
    if mask_vec is not None:
        mask_vec = np.asarray(mask_vec, dtype=np.float64)
        pos = 0
        for b in spec.blocks:
            if b.width_prunable:
                v[b.name] = mask_vec[pos:pos + b.hidden]
                pos += b.hidden
        for b in spec.blocks:
            if b.gated:
                u[b.name] = mask_vec[pos]
                pos += 1

    F = xt @ P["in_w"].T + P["in_b"]
    saved, outs = {}, []
    for b in spec.blocks:
        inp = [F, saved[b.skip], cond] if b.role == "dec" else [F, cond]
        h = _silu(np.concatenate(inp, axis=1) @ P[f"w1.{b.name}"].T + P[f"b1.{b.name}"])
        if b.name in v:
            h = h * v[b.name]
        f = F + h @ P[f"w2.{b.name}"].T + P[f"b2.{b.name}"]
        if b.name in u:
            f = u[b.name] * f + (1.0 - u[b.name]) * F
        F = f
        if b.role == "enc":
            saved[b.name] = F
        outs.append(F)
    out = F @ P["out_w"].T + P["out_b"]
    if spec.output_skip:
        out = out + xt
    return out, outs


def t64(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


ACCEPTANCE_LINES: list[str] = []


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
