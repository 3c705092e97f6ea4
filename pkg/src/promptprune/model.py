"""Toy encoder/mid/decoder denoiser with maskable width and depth units.

Each block is a one-hidden-layer residual MLP::

    f_j(F) = F + W2 · silu(W1 · [F (|| F_skip) || z || temb(t)] + b1) + b2

Width masks multiply the hidden activations; depth gates blend a block's
output with its input, ``u·f_j(F) + (1-u)·F``, so every block keeps its
output extents for any mask.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .numerics import DTYPE, RngStream

ROLES = ("enc", "mid", "dec")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    name: str
    role: str
    hidden: int = 32
    width_prunable: bool = True
    gated: bool = True
    skip: str | None = None


def default_blocks(hidden: int = 32) -> tuple[BlockSpec, ...]:
    return (
        BlockSpec("E1", "enc", hidden),
        BlockSpec("E2", "enc", hidden),
        BlockSpec("MID", "mid", hidden, width_prunable=False, gated=False),
        BlockSpec("D2", "dec", hidden, skip="E2"),
        BlockSpec("D1", "dec", hidden, skip="E1"),
    )


@dataclass(frozen=True)
class PrunableSpec:
    """Topology of the toy network and its prunable units.

    Architecture codes are laid out as ``[v_1 .. v_L, u_1 .. u_M]``: hidden
    units of every width-prunable block in block order, then one gate per
    gated block.
    """

    data_dim: int = 64
    model_dim: int = 64
    cond_dim: int = 32
    time_dim: int = 16
    blocks: tuple[BlockSpec, ...] = field(default_factory=default_blocks)
    io_proj: bool = True
    output_skip: bool = False  # add x_t to the output (no MACs)

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        self.validate()

    def validate(self) -> None:
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise SpecError(f"duplicate block names: {names}")
        if not self.io_proj and self.data_dim != self.model_dim:
            raise SpecError("data_dim must equal model_dim without io projections")
        if self.time_dim % 2:
            raise SpecError("time_dim must be even")
        encoders = [b.name for b in self.blocks if b.role == "enc"]
        partner: dict[str, str] = {}
        for b in self.blocks:
            if b.role not in ROLES:
                raise SpecError(f"block {b.name}: unknown role {b.role!r}")
            if b.hidden < 1:
                raise SpecError(f"block {b.name}: hidden must be >= 1")
            if b.role != "dec" and b.skip is not None:
                raise SpecError(f"block {b.name}: only decoder blocks take a skip source")
            if b.role == "dec":
                if b.skip is None:
                    raise SpecError(f"broken skip pair: decoder {b.name} has no skip source")
                if b.skip not in encoders:
                    raise SpecError(f"broken skip pair: decoder {b.name} -> {b.skip} (not an encoder block)")
                if encoders.index(b.skip) > names.index(b.name):
                    raise SpecError(f"broken skip pair: decoder {b.name} precedes {b.skip}")
                if b.skip in partner:
                    raise SpecError(f"broken skip pair: encoder {b.skip} feeds both {partner[b.skip]} and {b.name}")
                partner[b.skip] = b.name
        unpaired = [e for e in encoders if e not in partner]
        if unpaired:
            raise SpecError(f"broken skip pair: encoder blocks without a decoder partner: {unpaired}")

    @property
    def width_blocks(self) -> list[BlockSpec]:
        return [b for b in self.blocks if b.width_prunable]

    @property
    def gated_blocks(self) -> list[BlockSpec]:
        return [b for b in self.blocks if b.gated]

    @property
    def widths(self) -> list[int]:
        return [b.hidden for b in self.width_blocks]

    @property
    def L(self) -> int:
        return len(self.width_blocks)

    @property
    def M(self) -> int:
        return len(self.gated_blocks)

    @property
    def D(self) -> int:
        return sum(self.widths) + self.M

    @property
    def cond_total(self) -> int:
        return self.cond_dim + self.time_dim

    def block_in_dim(self, b: BlockSpec) -> int:
        return self.model_dim * (2 if b.role == "dec" else 1) + self.cond_total

    def macs_per_unit(self) -> dict[str, int]:
        """MACs of one hidden unit of each block: its W1 row plus its W2 column."""
        return {b.name: self.block_in_dim(b) + self.model_dim for b in self.blocks}

    def block_full_macs(self) -> dict[str, int]:
        per_unit = self.macs_per_unit()
        return {b.name: per_unit[b.name] * b.hidden for b in self.blocks}

    @property
    def io_macs(self) -> int:
        return 2 * self.data_dim * self.model_dim if self.io_proj else 0

    @property
    def full_macs(self) -> int:
        return self.io_macs + sum(self.block_full_macs().values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PrunableSpec":
        d = dict(d)
        d["blocks"] = tuple(BlockSpec(**b) for b in d["blocks"])
        return cls(**d)


@dataclass
class MaskSet:
    """Soft or hard masks; ``v[l]`` has shape (..., width_l), ``u`` has shape (..., M).

    A leading batch dimension gives every sample its own sub-network.
    """

    v: list[torch.Tensor]
    u: torch.Tensor

    @classmethod
    def from_vector(cls, spec: PrunableSpec, vec: torch.Tensor) -> "MaskSet":
        if vec.shape[-1] != spec.D:
            raise SpecError(f"mask vector has {vec.shape[-1]} entries, expected D={spec.D}")
        parts = list(torch.split(vec, spec.widths + [spec.M], dim=-1))
        return cls(v=parts[:-1], u=parts[-1])

    @classmethod
    def ones(cls, spec: PrunableSpec) -> "MaskSet":
        return cls.from_vector(spec, torch.ones(spec.D, dtype=DTYPE))

    def to_vector(self) -> torch.Tensor:
        return torch.cat([*self.v, self.u], dim=-1)

    def select(self, index: torch.Tensor) -> "MaskSet":
        """Gather rows of a stacked (N, ...) MaskSet, e.g. per-sample expert masks."""
        return MaskSet(v=[x[index] for x in self.v], u=self.u[index])

    def check(self, spec: PrunableSpec) -> None:
        if len(self.v) != spec.L:
            raise SpecError(f"expected {spec.L} width masks, got {len(self.v)}")
        for b, x in zip(spec.width_blocks, self.v):
            if x.shape[-1] != b.hidden:
                raise SpecError(f"width mask for layer {b.name} has {x.shape[-1]} entries, expected {b.hidden}")
        if self.u.shape[-1] != spec.M:
            raise SpecError(f"depth mask has {self.u.shape[-1]} entries, expected M={spec.M}")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=DTYPE).reshape(-1, 1)
    if dim == 0:
        return t.new_zeros((t.shape[0], 0))
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half)
    args = t * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _init_linear(gen: np.random.Generator, n_out: int, n_in: int) -> tuple[nn.Parameter, nn.Parameter]:
    w = gen.standard_normal((n_out, n_in)) / math.sqrt(max(n_in, 1))
    return nn.Parameter(torch.from_numpy(w)), nn.Parameter(torch.zeros(n_out, dtype=DTYPE))


class ToyDenoiser(nn.Module):
    def __init__(self, spec: PrunableSpec, rng: RngStream):
        super().__init__()
        self.spec = spec
        gen = rng.generator()
        C = spec.model_dim
        if spec.io_proj:
            self.in_w, self.in_b = _init_linear(gen, C, spec.data_dim)
            self.out_w, self.out_b = _init_linear(gen, spec.data_dim, C)
        self.w1 = nn.ParameterDict()
        self.b1 = nn.ParameterDict()
        self.w2 = nn.ParameterDict()
        self.b2 = nn.ParameterDict()
        for b in spec.blocks:
            self.w1[b.name], self.b1[b.name] = _init_linear(gen, b.hidden, spec.block_in_dim(b))
            self.w2[b.name], self.b2[b.name] = _init_linear(gen, C, b.hidden)

    def forward(
        self,
        xt: torch.Tensor,
        z: torch.Tensor,
        t: torch.Tensor,
        masks: MaskSet | None = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        spec = self.spec
        if masks is not None:
            masks.check(spec)
        if xt.shape[-1] != spec.data_dim:
            raise SpecError(f"input has {xt.shape[-1]} features, expected {spec.data_dim}")
        cond = torch.cat([z, timestep_embedding(t, spec.time_dim)], dim=-1)
        if cond.shape[-1] != spec.cond_total:
            raise SpecError(f"conditioning has {cond.shape[-1]} features, expected {spec.cond_total}")
        F = xt @ self.in_w.T + self.in_b if spec.io_proj else xt
        width_idx = {b.name: i for i, b in enumerate(spec.width_blocks)}
        gate_idx = {b.name: j for j, b in enumerate(spec.gated_blocks)}
        saved: dict[str, torch.Tensor] = {}
        outputs = []
        for b in spec.blocks:
            parts = [F, saved[b.skip], cond] if b.role == "dec" else [F, cond]
            h = torch.nn.functional.silu(torch.cat(parts, dim=-1) @ self.w1[b.name].T + self.b1[b.name])
            if masks is not None and b.name in width_idx:
                h = h * masks.v[width_idx[b.name]]
            f = F + h @ self.w2[b.name].T + self.b2[b.name]
            if masks is not None and b.name in gate_idx:
                u = masks.u[..., gate_idx[b.name]].unsqueeze(-1)
                f = u * f + (1.0 - u) * F
            F = f
            if b.role == "enc":
                saved[b.name] = F
            outputs.append(F)
        out = F @ self.out_w.T + self.out_b if spec.io_proj else F
        if spec.output_skip:
            out = out + xt
        return out, outputs


def build_toy_unet(spec: PrunableSpec, rng: RngStream) -> ToyDenoiser:
    spec.validate()
    return ToyDenoiser(spec, rng)


def forward_masked(model: ToyDenoiser, masks: MaskSet | None, xt, z_cond, t):
    return model(xt, z_cond, t, masks)


def block_macs(spec: PrunableSpec, masks: MaskSet) -> dict[str, torch.Tensor]:
    """Differentiable MACs of each block under ``masks``."""
    masks.check(spec)
    per_unit = spec.macs_per_unit()
    full = spec.block_full_macs()
    width_idx = {b.name: i for i, b in enumerate(spec.width_blocks)}
    gate_idx = {b.name: j for j, b in enumerate(spec.gated_blocks)}
    out = {}
    for b in spec.blocks:
        if b.name in width_idx:
            m = per_unit[b.name] * masks.v[width_idx[b.name]].sum(dim=-1)
        else:
            m = torch.full(masks.u.shape[:-1], float(full[b.name]), dtype=DTYPE)
        if b.name in gate_idx:
            m = masks.u[..., gate_idx[b.name]] * m
        out[b.name] = m
    return out


def estimate_macs(spec: PrunableSpec, masks: MaskSet) -> torch.Tensor:
    """Differentiable MAC count; the all-ones mask gives ``spec.full_macs``."""
    total = sum(block_macs(spec, masks).values())
    return total + spec.io_macs


def binarize(code: torch.Tensor, spec: PrunableSpec, threshold: float = 0.5) -> MaskSet:
    """Hard masks: a unit is kept iff ``sigmoid(logit) >= threshold``."""
    if code.shape[-1] != spec.D:
        raise SpecError(f"code has {code.shape[-1]} entries, expected D={spec.D}")
    hard = (torch.sigmoid(code.detach()) >= threshold).to(DTYPE)
    return MaskSet.from_vector(spec, hard)
