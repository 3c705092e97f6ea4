"""Binary checkpoint container.

Layout (little-endian)::

    magic "APTPCKPT" | u32 version | u64 meta_len | meta (UTF-8 JSON, sorted keys)
    u32 n_arrays
    per array: u32 name_len | name | u32 ndim | u64 dims[ndim] | u64 count | f8 data[count]
    u64 total_length | u32 crc32 of everything before the crc

A file is parsed completely into memory and checked before anything is
returned, so a corrupt file never yields partial state.
"""

from __future__ import annotations

import io
import json
import os
import struct
import subprocess
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import MaskSet, PrunableSpec, ToyDenoiser
from .numerics import DTYPE, RngStream
from .router import ArchPredictor

MAGIC = b"APTPCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    spec: PrunableSpec
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def config_hash(self) -> str:
        return self.meta.get("config_hash", "")

    @property
    def provenance(self) -> list[str]:
        return self.meta.setdefault("provenance", [])


def revision() -> str:
    """Short git revision of the source tree, or ``"unknown"`` outside a checkout."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "rev-parse", "--short=12", "HEAD"], cwd=here,
                             capture_output=True, text=True, timeout=5, check=True)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    meta = dict(ckpt.meta)
    meta["spec"] = ckpt.spec.to_dict()
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", ckpt.version, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(ckpt.arrays)))
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name], dtype="<f8", order="C")  # keeps 0-d shape
        key = name.encode()
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(struct.pack("<Q", arr.size))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    total = len(body) + 12
    body += struct.pack("<Q", total)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode(raw: bytes) -> Checkpoint:
    if len(raw) < len(MAGIC) + 24 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (total,) = struct.unpack_from("<Q", raw, len(raw) - 12)
    if total != len(raw):
        raise CheckpointError(f"length mismatch: header says {total}, file has {len(raw)}")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if crc != zlib.crc32(raw[:-4]):
        raise CheckpointError("checksum mismatch")
    r = _Reader(raw[:-12])
    r.take(len(MAGIC))
    version, meta_len = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"unreadable metadata: {err}") from err
    (n,) = r.unpack("<I")
    arrays = {}
    for _ in range(n):
        (klen,) = r.unpack("<I")
        name = r.take(klen).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (count,) = r.unpack("<Q")
        if count != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"array {name!r}: count {count} does not match shape {shape}")
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.raw):
        raise CheckpointError("trailing bytes after last array")
    spec = PrunableSpec.from_dict(meta.pop("spec"))
    return Checkpoint(spec=spec, arrays=arrays, meta=meta, version=version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path, expected_hash: str | None = None, force: bool = False) -> Checkpoint:
    """Read and verify a checkpoint.

    A config-hash mismatch raises unless ``force``; a forced load records the
    mismatch in the returned checkpoint's provenance.
    """
    ckpt = decode(Path(path).read_bytes())
    if expected_hash is not None and ckpt.config_hash != expected_hash:
        msg = f"config hash {ckpt.config_hash[:12]} does not match {expected_hash[:12]}"
        if not force:
            raise ConfigMismatch(msg)
        ckpt.provenance.append("forced load: " + msg)
    return ckpt


# -- packing pipeline state ---------------------------------------------------

def module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().numpy().copy() for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {}
    for k in module.state_dict():
        key = f"{prefix}/{k}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint has no array {key!r}")
        state[k] = torch.from_numpy(arrays[key].copy()).to(DTYPE)
    module.load_state_dict(state)
    for p in module.parameters():
        p.requires_grad_(False)


def _model(spec: PrunableSpec, prefix: str, arrays) -> ToyDenoiser:
    m = ToyDenoiser(spec, RngStream(0))
    load_module(prefix, m, arrays)
    return m


def pack_pruning(result, meta: dict) -> Checkpoint:
    arrays = {}
    arrays.update(module_arrays("teacher", result.teacher))
    arrays.update(module_arrays("model", result.model))
    if result.predictor is not None:
        arrays.update(module_arrays("predictor", result.predictor))
    arrays["codes"] = result.codes.detach().numpy().copy()
    for i, m in enumerate(result.masks):
        arrays[f"masks/{i}"] = m.to_vector().detach().numpy().copy()
    arrays["mac_fractions"] = np.asarray(result.mac_fractions, dtype=np.float64)
    meta = dict(meta)
    meta.setdefault("provenance", [])
    meta["variant"] = result.variant
    meta["N"] = result.N
    meta["has_predictor"] = result.predictor is not None
    return Checkpoint(spec=result.spec, arrays=arrays, meta=meta)


def unpack_pruning(ckpt: Checkpoint):
    from .training import PruningResult

    a, spec = ckpt.arrays, ckpt.spec
    predictor = None
    if ckpt.meta.get("has_predictor", True):
        d_z = a["predictor/weight"].shape[1]
        predictor = ArchPredictor(d_z, spec.D, RngStream(0))
        load_module("predictor", predictor, a)
    N = int(ckpt.meta["N"])
    masks = [MaskSet.from_vector(spec, torch.from_numpy(a[f"masks/{i}"].copy())) for i in range(N)]
    return PruningResult(
        spec=spec,
        teacher=_model(spec, "teacher", a),
        model=_model(spec, "model", a),
        predictor=predictor,
        codes=torch.from_numpy(a["codes"].copy()),
        masks=masks,
        mac_fractions=a["mac_fractions"].copy(),
        log=[],
        variant=ckpt.meta.get("variant", "full"),
    )


def pack_experts(result, experts, meta: dict) -> Checkpoint:
    ckpt = pack_pruning(result, meta)
    for i, m in enumerate(experts.models):
        ckpt.arrays.update(module_arrays(f"experts/{i}", m))
    ckpt.arrays["experts_trained"] = experts.trained.astype(np.float64)
    ckpt.meta["has_experts"] = True
    return ckpt


def unpack_experts(ckpt: Checkpoint, corpus=None):
    """Return ``(PruningResult, ExpertSet)``; routes cover the corpus training split when given."""
    from .router import RouteTable
    from .training import ExpertSet

    if not ckpt.meta.get("has_experts"):
        raise CheckpointError("checkpoint holds no fine-tuned experts")
    result = unpack_pruning(ckpt)
    models = [_model(ckpt.spec, f"experts/{i}", ckpt.arrays) for i in range(result.N)]
    if corpus is not None:
        routes = result.route(corpus.embeddings[corpus.train_idx])
    else:
        routes = RouteTable(assignments=np.zeros(0, dtype=np.int64), N=result.N)
    trained = ckpt.arrays["experts_trained"].astype(bool)
    return result, ExpertSet(masks=list(result.masks), models=models, trained=trained, routes=routes)
