"""End-to-end stages over a run directory.

Every stage reads and writes files under ``out``; artifacts are pure
functions of (config, seed). Wall-clock data goes only to ``metadata.json``.
"""

from __future__ import annotations

import json
import logging
import os
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, pack_experts, pack_pruning, revision, save_checkpoint, unpack_experts, unpack_pruning
from .config import RunConfig
from .corpus import Corpus, PromptRecord, gen_corpus, read_corpus, write_corpus
from .diffusion import make_schedule, sample
from .evaluation import EvalReport, evaluate
from .numerics import RngStream
from .router import RouteTable, write_route_csv
from .training import ablation_run, finetune, pretrain_teacher, spec_for

log = logging.getLogger(__name__)

PRUNED = "pruned.ckpt"
EXPERTS = "experts.ckpt"


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_jsonl(path: Path, rows: list[dict]) -> None:
    _atomic_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _stamp(out: Path, stage: str, started: float) -> None:
    """Record wall-clock timing; kept apart from the deterministic artifacts."""
    path = out / "metadata.json"
    meta = json.loads(path.read_text()) if path.exists() else {}
    meta[stage] = {"finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "seconds": round(time.time() - started, 3)}
    _atomic_text(path, json.dumps(meta, sort_keys=True, indent=2) + "\n")


def schedule_for(cfg: RunConfig):
    s = cfg.schedule
    return make_schedule(s.T, s.kind, s.beta_start, s.beta_end)


def load_corpus(cfg: RunConfig) -> Corpus:
    if cfg.corpus_dir and (Path(cfg.corpus_dir) / "index.json").exists():
        return read_corpus(cfg.corpus_dir)
    return gen_corpus(cfg.corpus)


def _meta(cfg: RunConfig, stream: RngStream) -> dict:
    return {
        "config_hash": cfg.config_hash(),
        "revision": revision(),
        "rng": {"seed": stream.seed, "stream": stream.stream},
        "provenance": [],
    }


def finetune_config(cfg: RunConfig, variant: str):
    """A single static expert gets the whole mixture's fine-tuning budget (N x iters)."""
    if variant == "uni_arch":
        return cfg.finetune.model_copy(update={"iters": cfg.finetune.iters * cfg.pruning.N})
    return cfg.finetune


def stage_gen_corpus(cfg: RunConfig, out: Path) -> Corpus:
    started = time.time()
    target = Path(cfg.corpus_dir) if cfg.corpus_dir else out / "corpus"
    corpus = gen_corpus(cfg.corpus)
    write_corpus(corpus, target)
    _stamp(out, "gen-corpus", started)
    return corpus


def stage_prune(cfg: RunConfig, out: Path, teacher=None):
    started = time.time()
    corpus = load_corpus(cfg)
    sched = schedule_for(cfg)
    spec = spec_for(cfg.model, corpus.data.shape[1], corpus.embeddings.shape[1])
    rng = RngStream(cfg.seed)
    if teacher is None:
        teacher = pretrain_teacher(corpus, spec, sched, cfg.pruning, rng.child("pretrain"))
    result = ablation_run(cfg.variant, corpus, cfg.pruning, rng.child("prune"), sched, spec, teacher)
    save_checkpoint(pack_pruning(result, _meta(cfg, rng.child("prune"))), out / PRUNED)
    write_jsonl(out / "prune_log.jsonl", result.log)
    _stamp(out, "prune", started)
    return result


def stage_finetune(cfg: RunConfig, out: Path, force: bool = False, result=None):
    started = time.time()
    corpus = load_corpus(cfg)
    if result is None:
        result = unpack_pruning(load_checkpoint(out / PRUNED, cfg.config_hash(), force))
    rng = RngStream(cfg.seed).child("finetune")
    experts = finetune(result, corpus, finetune_config(cfg, result.variant), rng, schedule_for(cfg))
    save_checkpoint(pack_experts(result, experts, _meta(cfg, rng)), out / EXPERTS)
    _stamp(out, "finetune", started)
    return result, experts


def read_prompts(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """prompt ids, labels (-1 when absent) and embeddings from a prompts.jsonl file."""
    ids, labels, emb = [], [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if obj.get("embedding") is None:
            raise ValueError(f"prompt {obj.get('prompt_id')} has no embedding")
        ids.append(int(obj["prompt_id"]))
        labels.append(int(obj.get("cluster_label", -1)))
        emb.append(np.asarray(obj["embedding"], dtype=np.float64))
    return np.asarray(ids, dtype=np.int64), np.asarray(labels, dtype=np.int64), np.stack(emb)


def stage_route(cfg: RunConfig, out: Path, prompts=None, force: bool = False) -> RouteTable:
    started = time.time()
    result = unpack_pruning(load_checkpoint(out / PRUNED, cfg.config_hash(), force))
    if prompts is not None:
        ids, labels, emb = read_prompts(prompts)
    else:
        corpus = load_corpus(cfg)
        ids, labels, emb = corpus.prompt_ids, corpus.labels, corpus.embeddings
    routes = result.route(emb)
    write_route_csv(out / "routes.csv", ids, labels, routes)
    _stamp(out, "route", started)
    return routes


def stage_sample(cfg: RunConfig, out: Path, force: bool = False) -> np.ndarray:
    """Draw one sample per held-out prompt from its routed expert; written in corpus binary format."""
    started = time.time()
    corpus = load_corpus(cfg)
    result, experts = unpack_experts(load_checkpoint(out / EXPERTS, cfg.config_hash(), force))
    held = corpus.heldout_idx
    routes = result.route(corpus.embeddings[held])
    sched = schedule_for(cfg)
    rng = RngStream(cfg.seed).child("sample")
    gen = np.zeros((len(held), corpus.data.shape[1]))
    for i in range(result.N):
        local = routes.members(i)
        if len(local):
            idx = held[local]
            with torch.no_grad():
                gen[local] = sample(experts.models[i], result.masks[i], corpus.embeddings[idx], sched, rng,
                                    row_keys=corpus.prompt_ids[idx]).numpy()
    records = [corpus.records[j] for j in held]
    samples = Corpus(
        records=[PromptRecord(r.prompt_id, r.cluster_label, r.embedding, r.difficulty) for r in records],
        data=gen,
        heldout=np.ones(len(held), dtype=bool),
        K=corpus.K,
    )
    write_corpus(samples, out / "samples")
    _stamp(out, "sample", started)
    return gen


def stage_eval(cfg: RunConfig, out: Path, force: bool = False) -> EvalReport:
    started = time.time()
    corpus = load_corpus(cfg)
    result, experts = unpack_experts(load_checkpoint(out / EXPERTS, cfg.config_hash(), force), corpus)
    report, budget = evaluate(result, experts, corpus, schedule_for(cfg), cfg.eval, RngStream(cfg.seed).child("eval"))
    _atomic_text(out / "eval.json", report.to_json())
    budget.write_csv(out / "block_ratios.csv")
    _stamp(out, "eval", started)
    return report


def render_report(report: EvalReport) -> str:
    lines = [f"variant {report.variant}, {report.N} experts"]
    lines.append(f"usage-weighted MAC fraction {report.usage_weighted_mac_fraction:.4f}")
    lines.append(f"assignment entropy {report.assignment_entropy:.4f} (max {np.log(report.N):.4f})")
    lines.append(f"mean within-cluster modal agreement {report.modal_agreement_mean:.4f}")
    lines.append(f"pooled held-out loss {report.pooled_loss_before:.5f} -> {report.pooled_loss_after:.5f}")
    lines.append(f"pooled toy MMD {report.mmd_pooled:.6f}")
    lines.append("expert  macs    share   loss_before  loss_after  mmd")
    for i in range(report.N):
        def f(v, w=".5f"):
            return "-" if v is None else format(v, w)
        lines.append(
            f"{i:>6}  {report.expert_mac_fractions[i]:.4f}  {report.usage_shares[i]:.4f}  "
            f"{f(report.heldout_loss_before[i]):>11}  {f(report.heldout_loss_after[i]):>10}  "
            f"{f(report.mmd_per_expert[i], '.6f')}"
        )
    return "\n".join(lines) + "\n"


def stage_report(cfg: RunConfig, out: Path) -> str:
    path = out / "eval.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run eval first")
    text = render_report(EvalReport.from_json(path.read_text()))
    _atomic_text(out / "report.txt", text)
    return text


def run_all(cfg: RunConfig, out: Path, teacher=None) -> EvalReport:
    """prune -> finetune -> route -> eval in one process."""
    out.mkdir(parents=True, exist_ok=True)
    result = stage_prune(cfg, out, teacher)
    stage_finetune(cfg, out, result=result)
    stage_route(cfg, out)
    return stage_eval(cfg, out)
