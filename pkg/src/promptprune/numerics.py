"""Seeded sampling, small tensor helpers and finite-difference gradient checks.

All tensors are float64 torch tensors. Randomness comes from numpy generators
keyed by ``(seed, stream)`` so draws are reproducible independent of torch's
global RNG and of batch iteration order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

DTYPE = torch.float64

_U_MIN = 1e-12
_U_MAX = 1.0 - 1e-12


class NonFiniteError(FloatingPointError):
    """A loss or intermediate quantity became NaN/Inf."""

    def __init__(self, term: str, where: str = ""):
        self.term = term
        self.where = where
        msg = f"non-finite value in {term!r}"
        if where:
            msg += f" ({where})"
        super().__init__(msg)


def stream_id(*keys) -> int:
    """Stable 64-bit sub-stream id from an arbitrary key tuple.

    Uses sha256 over the repr of the keys, so the mapping does not depend on
    ``PYTHONHASHSEED`` or on the platform.
    """
    digest = hashlib.sha256(repr(keys).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class RngStream:
    """Immutable handle on a reproducible random stream.

    Every call to :meth:`generator` starts the stream from the beginning, so a
    sampler that receives the same ``RngStream`` always returns the same draws.
    Use :meth:`child` to get an independent stream for a sub-task.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed, self.stream & 0xFFFFFFFF, self.stream >> 32])
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys) -> "RngStream":
        return RngStream(self.seed, stream_id(self.stream, *keys))


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def sample_gumbel(shape: Sequence[int], rng: RngStream) -> torch.Tensor:
    """I.i.d. standard Gumbel draws via the clamped inverse CDF ``-log(-log U)``."""
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("shape must be nonempty")
    u = rng.generator().random(shape)
    u = np.clip(u, _U_MIN, _U_MAX)
    return torch.from_numpy(-np.log(-np.log(u)))


def sample_normal(shape: Sequence[int], rng: RngStream) -> torch.Tensor:
    return torch.from_numpy(rng.generator().standard_normal(tuple(shape)))


def cosine_sim(m: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two vectors. Raises on zero-norm input."""
    if m.shape != n.shape or m.dim() != 1:
        raise ValueError(f"cosine_sim needs equal-length vectors, got {tuple(m.shape)} and {tuple(n.shape)}")
    nm = torch.linalg.vector_norm(m)
    nn_ = torch.linalg.vector_norm(n)
    if nm.item() == 0.0 or nn_.item() == 0.0:
        raise ZeroDivisionError("cosine_sim of a zero-norm vector")
    return torch.clamp(torch.dot(m, n) / (nm * nn_), -1.0, 1.0)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarities between ``a`` (n, d) and ``b`` (m, d)."""
    na = torch.linalg.vector_norm(a, dim=1, keepdim=True)
    nb = torch.linalg.vector_norm(b, dim=1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ZeroDivisionError("cosine similarity of a zero-norm row")
    return (a / na) @ (b / nb).T


def check_finite(value: torch.Tensor, term: str, where: str = "") -> torch.Tensor:
    if not bool(torch.isfinite(value).all()):
        raise NonFiniteError(term, where)
    return value


@dataclass
class GradCheckReport:
    """Per-parameter relative errors between autograd and central differences.

    The relative error of a parameter tensor is ``max|g_a - g_fd| / max(max|g_a|,
    max|g_fd|)``; it is 0 when both gradients vanish.
    """

    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def __str__(self) -> str:
        lines = [f"{k}: {v:.3e}" for k, v in self.errors.items()]
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status} (max {self.max_error:.3e}, tol {self.tol:.1e})\n" + "\n".join(lines)


def grad_check(
    loss: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor] | Sequence[torch.Tensor],
    step: float = 1e-6,
    tol: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients of ``loss()`` against central differences.

    ``params`` are leaf tensors with ``requires_grad=True`` that ``loss`` reads
    by closure; they are perturbed in place and restored afterwards.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}

    for p in params.values():
        p.grad = None
    value = loss()
    check_finite(value, "loss", "at the checked parameters")
    value.backward()
    analytic = {
        k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for k, p in params.items()
    }

    report = GradCheckReport(tol=tol)
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            numeric = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                fp = loss()
                flat[i] = orig - step
                fm = loss()
                flat[i] = orig
                check_finite(fp, "loss", f"{name}[{i}] + step")
                check_finite(fm, "loss", f"{name}[{i}] - step")
                numeric[i] = (fp - fm) / (2.0 * step)
            a = analytic[name].view(-1)
            scale = max(a.abs().max().item(), numeric.abs().max().item()) if flat.numel() else 0.0
            diff = (a - numeric).abs().max().item() if flat.numel() else 0.0
            report.errors[name] = diff / scale if scale > 0 else diff
    return report
