"""Prompt router: frozen prompt embeddings -> architecture embeddings -> codes.

During pruning a batch is assigned to codes with an equipartitioned,
entropy-regularised transport plan (Sinkhorn-Knopp in the log domain). After
pruning a prompt goes to the code with the highest cosine similarity.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .numerics import DTYPE, RngStream, cosine_matrix, sample_gumbel


def encode_prompt(record) -> np.ndarray:
    """Frozen prompt encoder: returns the record's stored embedding unchanged."""
    emb = getattr(record, "embedding", None)
    if emb is None:
        raise ValueError(f"prompt {getattr(record, 'prompt_id', '?')} has no embedding")
    return emb


class ArchPredictor(nn.Module):
    """Single affine layer mapping prompt embeddings (d_z) to architecture embeddings (D)."""

    def __init__(self, d_z: int, D: int, rng: RngStream, init_bias: float = 0.0, init_scale: float = 1.0):
        super().__init__()
        gen = rng.generator()
        w = gen.standard_normal((D, d_z)) * init_scale / math.sqrt(d_z)
        self.weight = nn.Parameter(torch.from_numpy(w))
        self.bias = nn.Parameter(torch.full((D,), float(init_bias), dtype=DTYPE))

    @property
    def d_z(self) -> int:
        return self.weight.shape[1]

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.d_z:
            raise ValueError(f"prompt embedding has dim {z.shape[-1]}, predictor expects {self.d_z}")
        return z @ self.weight.T + self.bias


def predict_arch_embedding(z: torch.Tensor, params: ArchPredictor) -> torch.Tensor:
    return params(z)


class Codebook(nn.Module):
    def __init__(self, codes: torch.Tensor):
        super().__init__()
        if codes.dim() != 2 or codes.shape[0] < 1:
            raise ValueError("codebook needs an (N, D) tensor with N >= 1")
        self.codes = nn.Parameter(codes.detach().clone().to(DTYPE))

    @property
    def N(self) -> int:
        return self.codes.shape[0]

    @property
    def D(self) -> int:
        return self.codes.shape[1]


def gumbel_sigmoid(
    logits: torch.Tensor,
    gamma: float,
    rng: RngStream | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """``sigmoid((logits + g) / gamma)`` with ``g ~ Gumbel(0, 1)``.

    Without ``rng`` (and without explicit ``noise``) g is 0: deterministic mode.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if noise is None and rng is not None:
        noise = sample_gumbel(logits.shape, rng) if logits.numel() else torch.zeros_like(logits)
    x = logits if noise is None else logits + noise
    return torch.sigmoid(x / gamma)


@dataclass
class AssignmentMatrix:
    """Transport plan ``Q = diag(m) exp(S/eps) diag(n)``; m and n kept as logs."""

    Q: torch.Tensor
    log_m: torch.Tensor
    log_n: torch.Tensor
    eps_ot: float

    @property
    def m(self) -> torch.Tensor:
        return torch.exp(self.log_m)

    @property
    def n(self) -> torch.Tensor:
        return torch.exp(self.log_n)

    def entropy(self) -> float:
        q = self.Q[self.Q > 0]
        return float(-(q * torch.log(q)).sum())


@torch.no_grad()
def sinkhorn(scores: torch.Tensor, eps_ot: float, iters: int) -> AssignmentMatrix:
    """Equipartitioned Sinkhorn-Knopp on an (N, B) similarity matrix.

    Each round rescales rows to sum 1/N, then columns to sum 1/B, so the
    column marginals are exact on return.
    """
    if eps_ot <= 0:
        raise ValueError("eps_ot must be positive")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    scores = scores.detach().to(DTYPE)
    if not bool(torch.isfinite(scores).all()):
        raise FloatingPointError("non-finite score matrix")
    N, B = scores.shape
    K = scores / eps_ot
    log_n = torch.zeros(B, dtype=DTYPE)
    log_row, log_col = -math.log(N), -math.log(B)
    for _ in range(iters):
        log_m = log_row - torch.logsumexp(K + log_n[None, :], dim=1)
        log_n = log_col - torch.logsumexp(K + log_m[:, None], dim=0)
    Q = torch.exp(K + log_m[:, None] + log_n[None, :])
    return AssignmentMatrix(Q=Q, log_m=log_m, log_n=log_n, eps_ot=eps_ot)


def sinkhorn_assign(E: torch.Tensor, A: torch.Tensor, eps_ot: float = 0.05, iters: int = 3) -> AssignmentMatrix:
    """Plan between N codes (rows of ``A``) and B embeddings (rows of ``E``) on cosine scores."""
    if E.shape[0] < 1 or A.shape[0] < 1:
        raise ValueError("need at least one embedding and one code")
    return sinkhorn(cosine_matrix(A.detach(), E.detach()), eps_ot, iters)


@dataclass
class RouteTable:
    assignments: np.ndarray
    N: int
    cosines: np.ndarray | None = None

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.N)

    def members(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == i)

    def __len__(self) -> int:
        return len(self.assignments)


def route_pruning(Q: AssignmentMatrix) -> RouteTable:
    """Per-prompt code = argmax over each column of B·Q (first maximum wins)."""
    BQ = (Q.Q.shape[1] * Q.Q).numpy()
    return RouteTable(assignments=np.argmax(BQ, axis=0).astype(np.int64), N=BQ.shape[0])


def _first_argmax(rows: np.ndarray) -> np.ndarray:
    return np.argmax(rows, axis=-1)


def route_inference_batch(E: torch.Tensor, A: torch.Tensor) -> RouteTable:
    """Cosine argmax routing for a batch; ties go to the lowest code index."""
    cos = cosine_matrix(E.detach().to(DTYPE), A.detach().to(DTYPE)).numpy()
    idx = _first_argmax(cos)
    return RouteTable(assignments=idx.astype(np.int64), N=A.shape[0], cosines=cos[np.arange(len(idx)), idx])


def route_inference(e: torch.Tensor, A: torch.Tensor) -> int:
    return int(route_inference_batch(e.reshape(1, -1), A).assignments[0])


def init_codes_kmeans(E: np.ndarray, N: int, seed: int, n_init: int = 10) -> torch.Tensor:
    """N k-means centroids of the collected architecture embeddings."""
    from sklearn.cluster import KMeans

    E = np.asarray(E, dtype=np.float64)
    if N == 1:
        return torch.from_numpy(E.mean(axis=0, keepdims=True))
    km = KMeans(n_clusters=N, n_init=n_init, random_state=seed % (2**32))
    km.fit(E)
    return torch.from_numpy(np.asarray(km.cluster_centers_, dtype=np.float64))


def write_route_csv(path, prompt_ids, labels, routes: RouteTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prompt_id", "cluster_label", "code_index", "cosine_to_code"])
        cos = routes.cosines if routes.cosines is not None else np.full(len(routes), np.nan)
        for pid, lab, idx, c in zip(prompt_ids, labels, routes.assignments, cos):
            w.writerow([int(pid), int(lab), int(idx), repr(float(c))])
