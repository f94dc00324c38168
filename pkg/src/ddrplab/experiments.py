"""Paired training runs: MLM vs MTH similarity curves and DDRP vs BERT-R
triangle percentages."""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

from .data import Corpus
from .diagnostics import similarity_curve, triangle_percentage
from .model import init_params, load_checkpoint
from .training import TrainConfig, train


def compare_objectives(cfg: TrainConfig, corpus: Corpus, out_dir, seeds, sentences,
                       sample_size: int = 5000) -> list[dict]:
    """Train MLM and MTH with shared seeds and evaluate f(S), f(H) at every checkpoint.

    Writes ``curves.jsonl`` (one record per seed, objective and checkpoint)
    and returns those records.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for seed in seeds:
        for objective in ("mlm", "mth"):
            run_cfg = replace(cfg, seed=seed, objective=objective)
            result = train(run_cfg, corpus, out_dir / f"{objective}_seed{seed}")
            for rep in similarity_curve(result.checkpoints, sentences, sample_size, seed=seed):
                records.append({
                    "seed": seed,
                    "objective": objective,
                    "step": rep.step,
                    "token_similarity": rep.token_similarity,
                    "head_similarity": rep.head_similarity,
                    "sentences": rep.sentences,
                })
    with (out_dir / "curves.jsonl").open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return records


def final_pairs(records: list[dict]) -> dict[int, dict[str, dict]]:
    """``{seed: {objective: last-checkpoint record}}``."""
    out: dict[int, dict[str, dict]] = {}
    for r in records:
        slot = out.setdefault(r["seed"], {})
        if r["objective"] not in slot or r["step"] > slot[r["objective"]]["step"]:
            slot[r["objective"]] = r
    return out


def compare_triangles(cfg: TrainConfig, corpus: Corpus, out_dir, seeds, sentences,
                      kinds=("ddrp", "shaw"), t: float | None = None, ms: int = 64) -> list[dict]:
    """Train each kind with ``group_count=2`` per seed and count up-down triangles
    at the final checkpoint, alongside the untrained model of the same seed."""
    out_dir = Path(out_dir)
    t = cfg.triangle_t if t is None else t
    records = []
    for seed in seeds:
        for kind in kinds:
            run_cfg = replace(cfg, seed=seed, encoding_kind=kind, group_count=2)
            result = train(run_cfg, corpus, out_dir / f"{kind}_seed{seed}")
            ckpt = load_checkpoint(result.checkpoints[-1])
            trained = triangle_percentage(sentences, ckpt.config, ckpt.params, t, ms)
            untrained = triangle_percentage(
                sentences, ckpt.config, init_params(ckpt.config, seed), t, ms
            )
            records.append({
                "seed": seed,
                "kind": kind,
                "t": t,
                "trained": trained.percentage,
                "untrained": untrained.percentage,
                "sentences": trained.sentences,
            })
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "triangles.jsonl").open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return records
