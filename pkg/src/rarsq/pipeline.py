"""Stage orchestration shared by the command line and the acceptance suite."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .analysis import conditional_matrix, independence_test, pair_counts, row_entropy, usage_histogram
from .autoencoder import SkillAutoencoder, Stage1Result, train_stage1
from .config import RunConfig
from .cst import CSTResult, Planner, SamplingConfig, rollout_batch, stage1_digest, train_cst
from .envlab import STANDARD_TASKS, DemoStore, collect_demos, gen_trajectories

log = logging.getLogger(__name__)

# evaluation episodes use env seeds far away from the demonstration seeds
EVAL_SEED_BASE = 10_000_000
EVAL_SEED_STRIDE = 100_000

ABLATIONS = ("no-ar", "no-refine")


def apply_ablation(cfg: RunConfig, ablation: str | None) -> RunConfig:
    if ablation is None:
        return cfg
    if ablation == "no-ar":
        return dataclasses.replace(cfg, cst=dataclasses.replace(cfg.cst, autoregressive=False))
    if ablation == "no-refine":
        return dataclasses.replace(cfg, cst=dataclasses.replace(cfg.cst, refine=False))
    raise ValueError(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")


def demonstrations(cfg: RunConfig) -> DemoStore:
    return collect_demos(cfg.demos.episodes_per_task, cfg.demos.seed)


def stage1_chunks(cfg: RunConfig, demos: DemoStore | None = None) -> np.ndarray:
    """Training chunks for stage 1: the synthetic mode dataset or the demo windows."""
    if cfg.data == "synthetic":
        return gen_trajectories(cfg.synthetic)[0]
    demos = demos if demos is not None else demonstrations(cfg)
    return demos.windows(cfg.cst.history, cfg.stage1.horizon)[2]


def fit_stage1(cfg: RunConfig, chunks: np.ndarray, metrics_path=None) -> Stage1Result:
    return train_stage1(chunks, cfg.stage1, metrics_path)


def fit_policy(cfg: RunConfig, skills: SkillAutoencoder, demos: DemoStore, metrics_path=None) -> CSTResult:
    """Train the transformer; raises if the frozen stage-1 model changed underneath."""
    before = stage1_digest(skills)
    obs, tasks, chunks = demos.windows(cfg.cst.history, skills.cfg.horizon)
    result = train_cst(skills, obs, tasks, chunks, cfg.cst, metrics_path)
    if stage1_digest(skills) != before:
        raise RuntimeError("stage-1 weights changed during transformer training")
    return result


def env_seeds(seed: int, episodes: int) -> list[int]:
    return [EVAL_SEED_BASE + seed * EVAL_SEED_STRIDE + i for i in range(episodes)]


def evaluate(planner: Planner, episodes: int, seeds, sampling: SamplingConfig, history: int = 10,
             replan_every: int = 4, tasks=STANDARD_TASKS) -> dict:
    """Success per task and seed, mean/std over seeds, and per-stage completion rates."""
    seeds = [int(s) for s in seeds]
    report: dict = {"episodes_per_task": episodes, "seeds": seeds, "per_task": {}, "per_seed": {}}
    if episodes <= 0 or not seeds:
        report.update(mean_success=None, std_success=None)
        return report
    by_seed = np.zeros((len(seeds), len(tasks)))
    stage_hits = [np.zeros(len(t.waypoints)) for t in tasks]
    for i, seed in enumerate(seeds):
        ids = [t for t in range(len(tasks)) for _ in range(episodes)]
        env_s = [s for _ in range(len(tasks)) for s in env_seeds(seed, episodes)]
        samp = dataclasses.replace(sampling, seed=seed)
        records = rollout_batch(planner, ids, env_s, samp, history, replan_every)
        for rec in records:
            by_seed[i, rec.task_id] += rec.success / episodes
            stage_hits[rec.task_id][: rec.stages_completed] += 1
        report["per_seed"][str(seed)] = {t.name: float(by_seed[i, k]) for k, t in enumerate(tasks)}
    total = episodes * len(seeds)
    for k, t in enumerate(tasks):
        report["per_task"][t.name] = {
            "success_mean": float(by_seed[:, k].mean()),
            "success_std": float(by_seed[:, k].std()),
            "stage_completion": [float(h / total) for h in stage_hits[k]],
        }
    per_seed_mean = by_seed.mean(axis=1)
    report["mean_success"] = float(per_seed_mean.mean())
    report["std_success"] = float(per_seed_mean.std())
    return report


@dataclass
class SkillAnalysis:
    histogram: np.ndarray  # (D, K)
    counts: np.ndarray | None  # (K, K) depth-1/depth-2 pairs
    conditional: np.ndarray | None
    entropy: np.ndarray | None
    independence: dict | None


def analyze_codes(skills: SkillAutoencoder, chunks: np.ndarray) -> SkillAnalysis:
    with torch.no_grad():
        codes = skills.codes_for(torch.from_numpy(skills.normalizer.normalize(chunks))).numpy()
    k = skills.cfg.codebook_size
    hist = usage_histogram(codes, k)
    if codes.shape[1] < 2:
        return SkillAnalysis(hist, None, None, None, None)
    counts = pair_counts(codes[:, 0], codes[:, 1], k)
    cond = conditional_matrix(counts)
    return SkillAnalysis(hist, counts, cond, row_entropy(cond), independence_test(counts))


def write_matrix_csv(path: Path, matrix: np.ndarray, row_label: str, col_prefix: str) -> None:
    k = matrix.shape[1]
    lines = [",".join([row_label, *(f"{col_prefix}{j}" for j in range(k))])]
    for i, row in enumerate(matrix):
        lines.append(",".join([str(i), *("nan" if np.isnan(v) else f"{v:.10g}" for v in row)]))
    Path(path).write_text("\n".join(lines) + "\n")
