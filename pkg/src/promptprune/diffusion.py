"""Forward noising, the noise-prediction loss, and an ancestral DDPM sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import MaskSet, SpecError, ToyDenoiser
from .numerics import DTYPE, RngStream


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule. Arrays are indexed by step ``t`` in ``1..T`` at position ``t-1``."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def sigma2(self) -> np.ndarray:
        return self.beta

    def abar(self, t) -> torch.Tensor:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ScheduleError(f"timestep out of range [1, {self.T}]: {t}")
        return torch.as_tensor(self.alpha_bar[t - 1], dtype=DTYPE)


def make_schedule(T: int = 100, kind: str = "linear", beta_start: float = 1e-4, beta_end: float = 0.2) -> NoiseSchedule:
    if kind != "linear":
        raise ScheduleError(f"unsupported schedule kind {kind!r}")
    if T < 2:
        raise ScheduleError("T must be >= 2")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t)·x0 + sqrt(1-abar_t)·eps``; ``t`` is a scalar or one step per row."""
    if x0.shape != eps.shape:
        raise SpecError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ in shape")
    ab = sched.abar(t)
    if ab.dim() == 1 and x0.dim() == 2:
        ab = ab.unsqueeze(1)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


@dataclass
class Batch:
    """A batch of training samples (x0, prompt, t, eps, xt), one row per item."""

    x0: torch.Tensor
    z: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    xt: torch.Tensor
    prompt_ids: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.x0.shape[0]

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.int64)
        ti = torch.as_tensor(idx)
        return Batch(self.x0[ti], self.z[ti], self.t[ti], self.eps[ti], self.xt[ti],
                     self.prompt_ids[idx], self.labels[idx])


def make_batch(
    x0: np.ndarray,
    z: np.ndarray,
    prompt_ids: np.ndarray,
    labels: np.ndarray,
    sched: NoiseSchedule,
    rng: RngStream,
) -> Batch:
    """Draw (t, eps) for each item from a stream keyed by its prompt id.

    Keying by prompt id (not position) makes losses invariant to batch order.
    """
    n, dim = x0.shape
    ts = np.empty(n, dtype=np.int64)
    eps = np.empty((n, dim))
    for k, pid in enumerate(prompt_ids):
        gen = rng.child("item", int(pid)).generator()
        ts[k] = gen.integers(1, sched.T + 1)
        eps[k] = gen.standard_normal(dim)
    x0_t = torch.as_tensor(np.asarray(x0, dtype=np.float64))
    eps_t = torch.from_numpy(eps)
    t_t = torch.from_numpy(ts)
    return Batch(
        x0=x0_t,
        z=torch.as_tensor(np.asarray(z, dtype=np.float64)),
        t=t_t,
        eps=eps_t,
        xt=forward_noise(x0_t, ts, eps_t, sched),
        prompt_ids=np.asarray(prompt_ids),
        labels=np.asarray(labels),
    )


def per_sample_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise SpecError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return ((pred - target) ** 2).mean(dim=-1)


def ddpm_loss(model: ToyDenoiser, masks: MaskSet | None, batch: Batch, reduce: bool = True) -> torch.Tensor:
    """Mean squared error between predicted and true noise (per element)."""
    if len(batch) == 0:
        raise ValueError("ddpm_loss needs a nonempty batch")
    eps_hat, _ = model(batch.xt, batch.z, batch.t, masks)
    per = per_sample_mse(eps_hat, batch.eps)
    return per.mean() if reduce else per


@torch.no_grad()
def sample(
    model: ToyDenoiser,
    masks: MaskSet | None,
    z: torch.Tensor,
    sched: NoiseSchedule,
    rng: RngStream,
    x_T: torch.Tensor | None = None,
    row_keys=None,
) -> torch.Tensor:
    """Ancestral sampling from ``x_T`` down to ``x̂_0``; one row of ``z`` per sample.

    Each row draws its starting point and per-step noise from
    ``rng.child("row", key)``, so a row's sample does not depend on which
    other rows share the call. ``row_keys`` defaults to the row index.
    """
    z = torch.as_tensor(z, dtype=DTYPE)
    if z.dim() == 1:
        z = z.unsqueeze(0)
    n = z.shape[0]
    dim = model.spec.data_dim
    keys = range(n) if row_keys is None else [int(k) for k in row_keys]
    noise = torch.from_numpy(np.stack(
        [rng.child("row", k).generator().standard_normal((sched.T + 1, dim)) for k in keys]
    )) if n else torch.zeros((0, sched.T + 1, dim), dtype=DTYPE)
    x = x_T.clone() if x_T is not None else noise[:, sched.T]
    for t in range(sched.T, 0, -1):
        a, ab, b = sched.alpha[t - 1], sched.alpha_bar[t - 1], sched.beta[t - 1]
        eps_hat, _ = model(x, z, torch.full((n,), t, dtype=DTYPE), masks)
        x = (x - (b / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(a)
        if t > 1:
            x = x + np.sqrt(b) * noise[:, t - 1]
    return x
