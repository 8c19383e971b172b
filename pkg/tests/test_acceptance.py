"""Acceptance suite: one test (or a few) per criterion, each recording a pass/fail line.

The expensive pieces (synthetic stage-1 runs, the two-stage pipeline and its
ablations) are session fixtures shared between criteria. Run with
``pytest tests/test_acceptance.py -v``; the summary lists every criterion.
"""

import dataclasses
import itertools
import json
import math
import time

import numpy as np
import pytest
import torch

from frozen import frozen_stage1_loss
from rarsq import pipeline
from rarsq.autodiff import backward, finite_diff_check
from rarsq.autoencoder import SkillAutoencoder, Stage1Config, train_stage1
from rarsq.config import RunConfig
from rarsq.cst import SamplingConfig, nucleus_distribution, nucleus_sample
from rarsq.envlab import TrajectoryDatasetSpec, composite_clusters, gen_trajectories
from rarsq.quantizer import CodebookStack, fit_codebooks
from rarsq.rotation import Branch, compute_rotation

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
MODES = ("rotation", "ste")


# -- shared runs ----------------------------------------------------------------------------


def synthetic_runs(out):
    """Stage 1 on the standard synthetic dataset for both modes and three training seeds."""
    out.mkdir(parents=True, exist_ok=True)
    chunks, _ = gen_trajectories(TrajectoryDatasetSpec())
    runs = {}
    for seed, mode in itertools.product(SEEDS, MODES):
        cfg = Stage1Config(mode=mode, seed=seed)
        runs[mode, seed] = train_stage1(chunks, cfg, out / f"stage1_{mode}_seed{seed}.csv").metrics
    return runs


def analysis_exports(skills, chunks, out):
    res = pipeline.analyze_codes(skills, chunks)
    pipeline.write_matrix_csv(out / "usage_histogram.csv", res.histogram, "depth", "code_")
    pipeline.write_matrix_csv(out / "conditional_k2_given_k1.csv", res.conditional, "k1", "k2_")
    (out / "independence.json").write_text(json.dumps(res.independence, indent=2) + "\n")
    return res


def evaluate(policy, cfg):
    return pipeline.evaluate(policy, cfg.eval.episodes, cfg.eval.seeds, cfg.sampling, cfg.cst.history,
                             cfg.eval.replan_every)


def full_pipeline(out):
    """Desk-profile two-stage training plus evaluation; every metrics file lands in ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    cfg = RunConfig()
    demos = pipeline.demonstrations(cfg)
    chunks = pipeline.stage1_chunks(cfg, demos)
    skills = pipeline.fit_stage1(cfg, chunks, out / "stage1_rotation.csv").model
    policy = pipeline.fit_policy(cfg, skills, demos, out / "cst_full.csv").policy
    report = evaluate(policy, cfg)
    (out / "eval_full.json").write_text(json.dumps(report, indent=2) + "\n")
    analysis = analysis_exports(skills, chunks, out)
    return {"cfg": cfg, "demos": demos, "chunks": chunks, "skills": skills, "report": report,
            "analysis": analysis, "seconds": time.perf_counter() - start}


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def synthetic(workdir):
    start = time.perf_counter()
    runs = synthetic_runs(workdir / "synthetic")
    return runs, time.perf_counter() - start


@pytest.fixture(scope="session")
def full(workdir):
    return full_pipeline(workdir / "pipeline")


@pytest.fixture(scope="session")
def ablations(full, workdir):
    """Mean success per variant; the full model comes from the shared pipeline run."""
    out = workdir / "pipeline"
    cfg, demos, chunks = full["cfg"], full["demos"], full["chunks"]
    ste_cfg = dataclasses.replace(cfg, stage1=dataclasses.replace(cfg.stage1, mode="ste"))
    ste_skills = pipeline.fit_stage1(ste_cfg, chunks, out / "stage1_ste.csv").model
    variants = {
        "w/o rotation": (ste_skills, None),
        "w/o rotation & AR": (ste_skills, "no-ar"),
        "w/o AR": (full["skills"], "no-ar"),
        "w/o refinement": (full["skills"], "no-refine"),
    }
    reports = {"full": full["report"]}
    for name, (skills, ablation) in variants.items():
        slug = name.replace("w/o ", "no-").replace(" & ", "-").replace(" ", "-")
        policy = pipeline.fit_policy(pipeline.apply_ablation(cfg, ablation), skills, demos,
                                     out / f"cst_{slug}.csv").policy
        reports[name] = evaluate(policy, cfg)
        (out / f"eval_{slug}.json").write_text(json.dumps(reports[name], indent=2) + "\n")
    return reports


# -- 1. rotation algebra ------------------------------------------------------------------------


def test_c01_rotation_algebra(criterion):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = {"align": 0.0, "orth": 0.0, "norm": 0.0}
    for dim in (2, 8, 128):
        eye = np.eye(dim)
        for _ in range(1000):
            r, q = rng.standard_normal(dim), rng.standard_normal(dim) * rng.uniform(0.1, 10)
            op = compute_rotation(r, q)
            assert op.branch is Branch.REGULAR
            worst["align"] = max(worst["align"], np.linalg.norm(op.rotate(op.r_hat) - op.q_hat))
            rtr = op.rotate_transpose(op.rotate(eye))
            worst["orth"] = max(worst["orth"], np.linalg.norm(rtr - eye))
            worst["norm"] = max(worst["norm"], abs(np.linalg.norm(op.apply(r)) - np.linalg.norm(q)))
    seconds = time.perf_counter() - start
    ok = max(worst.values()) < 1e-6 and seconds < 5
    detail = (f"max |Rr-q| {worst['align']:.1e}, |R^TR-I|_F {worst['orth']:.1e}, "
              f"| |q~|-|q| | {worst['norm']:.1e} over 3000 pairs in {seconds:.1f}s")
    assert criterion(1, ok, detail), detail


# -- 2. gradients -----------------------------------------------------------------------------------


def toy_autoencoder(mode, seed):
    cfg = Stage1Config(mode=mode, horizon=2, action_dim=2, latent_dim=4, codebook_size=4, depth=2, seed=seed)
    torch.manual_seed(seed)
    model = SkillAutoencoder(cfg).double()
    gen = torch.Generator().manual_seed(seed)
    model.stack.vectors.data.copy_(torch.randn(2, 4, 4, generator=gen, dtype=torch.float64)
                                   * torch.tensor([1.0, 0.3], dtype=torch.float64)[:, None, None])
    model.stack.initialized = True
    chunks = torch.rand(6, 2, 2, generator=gen, dtype=torch.float64) * 2 - 1
    return model, chunks


def test_c02_gradient_suite(criterion):
    start = time.perf_counter()
    worst = 0.0
    for mode, seed in itertools.product(MODES, SEEDS):
        model, chunks = toy_autoencoder(mode, seed)
        params = {k: v.detach().clone() for k, v in model.encoder.named_parameters()}
        frozen, live = frozen_stage1_loss(model, chunks, params)
        leaves = {k: v.clone().requires_grad_(True) for k, v in params.items()}
        analytic = backward(live(leaves), leaves)
        worst = max(worst, finite_diff_check(frozen, params, analytic=analytic))
    seconds = time.perf_counter() - start
    ok = worst < 1e-4 and seconds < 30
    detail = f"max relative error {worst:.2e} (D=2, m=4, K=4; both modes, 3 toys each) in {seconds:.1f}s"
    assert criterion(2, ok, detail), detail


# -- 3. telescoping ---------------------------------------------------------------------------------


def test_c03_telescoping(criterion):
    rng = np.random.default_rng(3)
    books = torch.from_numpy(rng.standard_normal((2, 16, 8)))
    z = torch.from_numpy(rng.standard_normal((10_000, 8)) * 1.5)
    worst = 0.0
    for mode in MODES:
        stack = CodebookStack(8, 16, 2, mode, dtype=torch.float64)
        stack.vectors.data.copy_(books)
        path = stack.quantize(z)
        worst = max(worst, float((z - path.z_hat - path.residuals[-1]).abs().max()))
    detail = f"max |z - z_hat - r_D| = {worst:.1e} over 1e4 latents, both modes"
    assert criterion(3, worst < 1e-9, detail), detail


# -- 4. capacity ----------------------------------------------------------------------------------------


def test_c04_capacity(criterion):
    start = time.perf_counter()
    ratios = []
    for seed in SEEDS:
        x, _ = composite_clusters(seed=seed)
        x = torch.from_numpy(x)
        err = []
        for depth in (1, 2):
            stack = fit_codebooks(x, 16, depth, seed=seed, lloyd_iters=10)
            err.append(float((x - stack.quantize(x).z_hat).abs().sum(1).mean()))
        ratios.append(err[1] / err[0])
    seconds = time.perf_counter() - start
    ok = max(ratios) < 0.1 and seconds < 300
    detail = f"D=2/D=1 error ratio {', '.join(f'{r:.3f}' for r in ratios)} (target < 0.1) in {seconds:.0f}s"
    assert criterion(4, ok, detail), detail


# -- 5 & 6. codebook collapse and quantization error ------------------------------------------------------


def test_c05_codebook_collapse(synthetic, criterion):
    runs, seconds = synthetic
    ok, parts = seconds < 600, []
    for seed in SEEDS:
        rot, ste = runs["rotation", seed][-1], runs["ste", seed][-1]
        h_rot = math.log(rot["perplexity_d1"]) / math.log(16)
        h_ste = math.log(ste["perplexity_d1"]) / math.log(16)
        ok &= rot["active_codes_d1"] == 16 and h_rot >= 0.9
        ok &= ste["active_codes_d1"] < rot["active_codes_d1"] and h_ste < h_rot
        parts.append(f"seed {seed}: rotation {rot['active_codes_d1']}/16 H={h_rot:.3f}ln16, "
                     f"ste {ste['active_codes_d1']}/16 H={h_ste:.3f}ln16")
    detail = "; ".join(parts) + f" ({seconds:.0f}s)"
    assert criterion(5, ok, detail), detail


def test_c06_quantization_error_ordering(synthetic, criterion):
    runs, _ = synthetic
    ratios = [runs["rotation", s][-1]["quant_l1"] / runs["ste", s][-1]["quant_l1"] for s in SEEDS]
    ordered = all(r < 1 for r in ratios)
    ok = ordered and max(ratios) <= 0.5
    detail = (f"rotation/ste final |z-z_hat|_1 ratio {', '.join(f'{r:.3f}' for r in ratios)}; "
              f"ordering {'holds' if ordered else 'fails'}, target <= 0.5")
    assert criterion(6, ok, detail), detail


# -- 7. end to end ----------------------------------------------------------------------------------------


def test_c07_end_to_end(full, criterion):
    rep = full["report"]
    stages = ", ".join(f"{name} [{' '.join(f'{s:.2f}' for s in row['stage_completion'])}]"
                       for name, row in rep["per_task"].items())
    ok = rep["mean_success"] >= 0.9 and full["seconds"] < 1800
    detail = (f"mean success {rep['mean_success']:.3f} +/- {rep['std_success']:.3f} over seeds {rep['seeds']} "
              f"({rep['episodes_per_task']} episodes/task); stages: {stages}; {full['seconds'] / 60:.1f} min")
    assert criterion(7, ok, detail), detail


# -- 8. ablations -----------------------------------------------------------------------------------------------


def test_c08_ablation_order(ablations, criterion):
    s = {name: rep["mean_success"] for name, rep in ablations.items()}
    checks = [
        s["full"] >= s["w/o rotation"],
        s["w/o rotation"] >= s["w/o rotation & AR"],
        s["full"] >= s["w/o AR"],
        all(s["w/o refinement"] < v for k, v in s.items() if k != "w/o refinement"),
    ]
    detail = ", ".join(f"{k} {v:.3f}" for k, v in s.items())
    detail += " | " + ", ".join(f"{label} {'ok' if c else 'violated'}" for label, c in zip(
        ("full>=w/o rot", "w/o rot>=w/o rot&AR", "full>=w/o AR", "w/o refine worst"), checks))
    assert criterion(8, all(checks), detail), detail


# -- 9. skill dependency ---------------------------------------------------------------------------------------


def test_c09_skill_dependency(full, criterion):
    res = full["analysis"]
    rows = res.conditional[~np.isnan(res.conditional).any(axis=1)]
    row_err = float(np.abs(rows.sum(axis=1) - 1).max())
    peak = float(rows.max())
    p = res.independence["p_value"]
    ok = p < 0.01 and row_err <= 1e-9 and peak >= 2 / 16
    detail = (f"chi2 {res.independence['chi2']:.0f} (dof {res.independence['dof']}), p = {p:.2e}; "
              f"max |row sum - 1| {row_err:.1e}; max P(k2|k1) {peak:.2f}")
    assert criterion(9, ok, detail), detail


# -- 10. nucleus sampler -------------------------------------------------------------------------------------------


def brute_force_kept(probs, top_p):
    """Smallest subset reaching ``top_p``; among those, the one with the most mass."""
    n = len(probs)
    for size in range(1, n + 1):
        best = max(itertools.combinations(range(n), size), key=lambda c: probs[list(c)].sum())
        if probs[list(best)].sum() >= top_p:
            return set(best)
    return set(range(n))


def test_c10_nucleus_sampler(criterion):
    rng = np.random.default_rng(10)
    logits = np.array([1.2, 0.4, -0.3, 2.0, 0.0, -1.5, 0.9, -0.7])
    cfg = SamplingConfig(top_p=0.8, temperature=1.3)
    target = nucleus_distribution(logits, cfg.top_p, cfg.temperature)
    n = 100_000
    counts = np.bincount([nucleus_sample(logits, cfg, rng) for _ in range(n)], minlength=len(logits))
    sigma = np.sqrt(n * target * (1 - target))
    z = np.where(sigma > 0, np.abs(counts - n * target) / np.where(sigma > 0, sigma, 1), 0)
    freq_ok = bool(np.all(z <= 3) and np.all(counts[target == 0] == 0))

    argmax_ok = all(
        nucleus_sample(l, SamplingConfig(top_p=1.0, temperature=1e-6), rng) == int(np.argmax(l))
        for l in rng.standard_normal((200, 16))
    )

    cases = 0
    prefix_ok = True
    for k in range(1, 17):
        for _ in range(4):
            l = rng.standard_normal(k) * 2
            p = np.exp(l - l.max())
            p /= p.sum()
            top_p = float(rng.uniform(0.05, 1.0))
            kept = set(np.nonzero(nucleus_distribution(l, top_p) > 0)[0])
            prefix_ok &= kept == brute_force_kept(p, top_p)
            cases += 1
    ok = freq_ok and argmax_ok and prefix_ok
    detail = (f"max |z| per bin {z.max():.2f} over 1e5 draws; tau->0 argmax {'ok' if argmax_ok else 'fails'}; "
              f"kept set = brute-force minimal prefix on {cases} cases K=1..16 {'ok' if prefix_ok else 'fails'}")
    assert criterion(10, ok, detail), detail


# -- 11. reproducibility -----------------------------------------------------------------------------------------------


def test_c11_reproducibility(synthetic, full, ablations, workdir, criterion):
    synthetic_runs(workdir / "synthetic_rerun")
    full_pipeline(workdir / "pipeline_rerun")
    pairs = [(workdir / "synthetic", workdir / "synthetic_rerun"), (workdir / "pipeline", workdir / "pipeline_rerun")]
    compared, differing = 0, []
    for first, second in pairs:
        for f in sorted(second.iterdir()):
            compared += 1
            if f.read_bytes() != (first / f.name).read_bytes():
                differing.append(f.name)
    detail = f"{compared} metrics files re-generated, {len(differing)} differ" + (f": {differing}" if differing else "")
    assert criterion(11, not differing, detail), detail
