"""Synthetic clustered prompts paired with cluster-specific signals.

Cluster ``c`` has difficulty ``d = c / (K-1)``. Its signals are a constant
level plus ``round(d * max_harmonics)`` cosine harmonics (frequencies 1..k).
Each cluster owns ``1 + round(d * (modes - 1))`` fixed phase patterns and
every sample picks one of them, so harder clusters carry more frequency
content and more distinct patterns to denoise. ``modes=0`` draws fresh phases
per sample instead. Difficulty 0 gives a constant vector plus small noise.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import CorpusConfig
from .numerics import RngStream

CORPUS_MAGIC = b"APTPCORP"
CORPUS_VERSION = 1
_HEADER = struct.Struct("<8sIQQ")


class CorpusError(ValueError):
    pass


@dataclass
class PromptRecord:
    prompt_id: int
    cluster_label: int
    embedding: np.ndarray
    difficulty: float


@dataclass
class Corpus:
    records: list[PromptRecord]
    data: np.ndarray
    heldout: np.ndarray  # boolean, one per record
    K: int

    @property
    def embeddings(self) -> np.ndarray:
        return np.stack([r.embedding for r in self.records])

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.cluster_label for r in self.records], dtype=np.int64)

    @property
    def prompt_ids(self) -> np.ndarray:
        return np.array([r.prompt_id for r in self.records], dtype=np.int64)

    @property
    def difficulty(self) -> np.ndarray:
        return np.array([r.difficulty for r in self.records])

    def cluster_difficulty(self) -> np.ndarray:
        out = np.zeros(self.K)
        for r in self.records:
            out[r.cluster_label] = r.difficulty
        return out

    @property
    def train_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.heldout)

    @property
    def heldout_idx(self) -> np.ndarray:
        return np.flatnonzero(self.heldout)


def cluster_signal(level: float, n_harmonics: int, phases: np.ndarray, dim: int, amplitude: float) -> np.ndarray:
    pos = np.arange(dim) / dim
    x = np.full(dim, level)
    for h in range(1, n_harmonics + 1):
        x += amplitude * np.cos(2 * np.pi * h * pos + phases[h - 1])
    return x


def gen_corpus(cfg: CorpusConfig) -> Corpus:
    K, d_z, dim = cfg.K, cfg.d_z, cfg.data_dim
    if cfg.per_cluster < 2:
        raise CorpusError(f"{cfg.per_cluster} prompts per cluster cannot cover a train and a held-out split")
    root = RngStream(cfg.seed).child("corpus")
    gen = root.child("clusters").generator()
    means = gen.standard_normal((K, d_z))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    levels = gen.uniform(-1.0, 1.0, size=K)
    difficulty = np.arange(K) / (K - 1)
    harmonics = np.rint(difficulty * cfg.max_harmonics).astype(int)
    n_held = max(1, int(round(cfg.per_cluster * cfg.heldout_fraction)))
    if n_held >= cfg.per_cluster:
        raise CorpusError("held-out split would consume a whole cluster")

    n_modes = 1 + np.rint(difficulty * (max(cfg.modes, 1) - 1)).astype(int)
    mode_phases = gen.uniform(0.0, 2 * np.pi, size=(K, max(cfg.modes, 1), cfg.max_harmonics))
    records, data, held = [], [], []
    pid = 0
    for c in range(K):
        for k in range(cfg.per_cluster):
            g = root.child("record", pid).generator()
            z = means[c] + cfg.sigma_c * g.standard_normal(d_z) / np.sqrt(d_z)
            z /= np.linalg.norm(z)
            if cfg.modes > 0:
                phases = mode_phases[c, g.integers(n_modes[c])]
            else:
                phases = g.uniform(0.0, 2 * np.pi, size=cfg.max_harmonics)
            x = cluster_signal(levels[c], harmonics[c], phases, dim, cfg.harmonic_amplitude) + cfg.data_noise * g.standard_normal(dim)
            records.append(PromptRecord(pid, c, z, float(difficulty[c])))
            data.append(x)
            held.append(k >= cfg.per_cluster - n_held)
            pid += 1
    return Corpus(records=records, data=np.asarray(data), heldout=np.asarray(held), K=K)


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_corpus(corpus: Corpus, out_dir) -> None:
    """prompts.jsonl + data.bin (little-endian float64) + index.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for r in corpus.records:
        lines.append(json.dumps({
            "prompt_id": r.prompt_id,
            "cluster_label": r.cluster_label,
            "embedding": [float(v) for v in r.embedding],
            "difficulty": r.difficulty,
        }))
    _atomic_write(out / "prompts.jsonl", ("\n".join(lines) + "\n").encode())
    n, dim = corpus.data.shape
    payload = _HEADER.pack(CORPUS_MAGIC, CORPUS_VERSION, n, dim) + corpus.data.astype("<f8").tobytes()
    _atomic_write(out / "data.bin", payload)
    index = {
        "version": CORPUS_VERSION,
        "count": n,
        "dim": dim,
        "K": corpus.K,
        "rows": {str(r.prompt_id): i for i, r in enumerate(corpus.records)},
        "heldout": [int(r.prompt_id) for r, h in zip(corpus.records, corpus.heldout) if h],
    }
    _atomic_write(out / "index.json", json.dumps(index, sort_keys=True).encode())


def read_data_bin(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorpusError(f"{path}: truncated header")
    magic, version, n, dim = _HEADER.unpack_from(raw)
    if magic != CORPUS_MAGIC:
        raise CorpusError(f"{path}: bad magic {magic!r}")
    if version != CORPUS_VERSION:
        raise CorpusError(f"{path}: unsupported version {version}")
    if len(raw) != _HEADER.size + 8 * n * dim:
        raise CorpusError(f"{path}: expected {n}x{dim} values, file length {len(raw)}")
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n, dim).astype(np.float64)


def read_corpus(in_dir) -> Corpus:
    d = Path(in_dir)
    index = json.loads((d / "index.json").read_text())
    data = read_data_bin(d / "data.bin")
    records = []
    for line in (d / "prompts.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        emb = obj.get("embedding")
        if emb is None:
            raise CorpusError(f"prompt {obj.get('prompt_id')} has no embedding")
        records.append(PromptRecord(int(obj["prompt_id"]), int(obj["cluster_label"]),
                                    np.asarray(emb, dtype=np.float64), float(obj["difficulty"])))
    if len(records) != data.shape[0]:
        raise CorpusError(f"{len(records)} prompt records but {data.shape[0]} data rows")
    rows = index["rows"]
    order = np.array([rows[str(r.prompt_id)] for r in records])
    data = data[order]
    held_ids = set(index["heldout"])
    heldout = np.array([r.prompt_id in held_ids for r in records])
    return Corpus(records=records, data=data, heldout=heldout, K=int(index["K"]))
