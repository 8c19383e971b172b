"""Command line: ``rarsq {train-rarsq,train-cst,eval,analyze,compare}``.

Exit codes: 0 ok, 2 training divergence, 3 checkpoint incompatibility, 4 bad config.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import pipeline
from .autoencoder import SkillAutoencoder, TrainingDiverged
from .config import ConfigError, RunConfig, echo_config, load_config
from .cst import CheckpointMismatch, ExpertPlanner, SkillPolicy
from .quantizer import MODES

log = logging.getLogger("rarsq")

EXIT_OK, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_CONFIG = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--profile", choices=("desk", "paper"), help="override the config profile")
    p.add_argument("--seed", type=int, help="training seed for both stages")
    p.add_argument("--out", type=Path, help="output directory (default: output_dir from the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rarsq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-rarsq", help="train the skill autoencoder")
    _common(p)
    p.add_argument("--mode", choices=MODES, help="gradient estimator through the quantizer")
    p.add_argument("--data", choices=("demos", "synthetic"), help="training chunks")

    p = sub.add_parser("train-cst", help="train the skill transformer on a frozen autoencoder")
    _common(p)
    p.add_argument("--stage1", type=Path, required=True, help="autoencoder checkpoint")
    p.add_argument("--ablate", choices=pipeline.ABLATIONS)

    p = sub.add_parser("eval", help="roll out a policy on the point-mass suite")
    _common(p)
    p.add_argument("--policy", type=Path, help="policy checkpoint (omit with --expert)")
    p.add_argument("--stage1", type=Path, help="autoencoder checkpoint the policy decodes through")
    p.add_argument("--expert", action="store_true", help="evaluate the scripted expert instead")
    p.add_argument("--episodes", type=int, help="episodes per task and seed")
    p.add_argument("--seeds", type=int, nargs="+", help="evaluation seeds")

    p = sub.add_parser("analyze", help="export code-usage and dependency statistics")
    _common(p)
    p.add_argument("--stage1", type=Path, required=True)
    p.add_argument("--metrics", type=Path, help="stage-1 metrics CSV for the quantization-loss curve")
    p.add_argument("--data", choices=("demos", "synthetic"))

    p = sub.add_parser("compare", help="rotation vs STE plus ablations, as tables")
    _common(p)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    return parser


def resolve_config(args) -> RunConfig:
    overrides: dict = {}
    if args.profile:
        overrides["profile"] = args.profile
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["stage1"] = {"seed": args.seed}
        overrides["cst"] = {"seed": args.seed}
    if getattr(args, "mode", None):
        overrides.setdefault("stage1", {})["mode"] = args.mode
    if getattr(args, "data", None):
        overrides["data"] = args.data
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    ev = {}
    if getattr(args, "episodes", None) is not None:
        ev["episodes"] = args.episodes
    if getattr(args, "seeds", None):
        ev["seeds"] = list(args.seeds)
    if ev:
        overrides["eval"] = ev
    cfg = load_config(args.config, overrides)
    return pipeline.apply_ablation(cfg, getattr(args, "ablate", None))


def cmd_train_rarsq(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    echo_config(cfg, out)
    chunks = pipeline.stage1_chunks(cfg)
    result = pipeline.fit_stage1(cfg, chunks, out / "stage1_metrics.csv")
    result.model.save(out / "stage1.bin")
    last = result.metrics[-1]
    print(f"stage 1 ({cfg.stage1.mode}): recon {last['recon']:.5f}, quant_l1 {last['quant_l1']:.5f}, "
          f"active codes d1 {last['active_codes_d1']}/{cfg.stage1.codebook_size} -> {out / 'stage1.bin'}")
    return EXIT_OK


def cmd_train_cst(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    skills = SkillAutoencoder.load(args.stage1)
    if (skills.cfg.horizon, skills.cfg.action_dim) != (cfg.stage1.horizon, cfg.stage1.action_dim):
        raise CheckpointMismatch(
            f"checkpoint chunks are T={skills.cfg.horizon}, A={skills.cfg.action_dim}; config expects "
            f"T={cfg.stage1.horizon}, A={cfg.stage1.action_dim}")
    echo_config(cfg, out)
    result = pipeline.fit_policy(cfg, skills, pipeline.demonstrations(cfg), out / "cst_metrics.csv")
    result.policy.save(out / "policy.bin")
    last = result.metrics[-1]
    ces = ", ".join(f"{k} {v:.4f}" for k, v in last.items() if k.startswith("ce_"))
    print(f"transformer: {ces}, offset {last['offset']:.5f} -> {out / 'policy.bin'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    echo_config(cfg, out)
    if args.expert:
        planner = ExpertPlanner(cfg.stage1.horizon)
    else:
        if args.policy is None or args.stage1 is None:
            raise ConfigError("eval needs --policy and --stage1, or --expert")
        planner = SkillPolicy.load(args.policy, args.stage1)
    report = pipeline.evaluate(planner, cfg.eval.episodes, cfg.eval.seeds, cfg.sampling,
                               cfg.cst.history, cfg.eval.replan_every)
    (out / "eval_report.json").write_text(json.dumps(report, indent=2) + "\n")
    if report["mean_success"] is None:
        print("no episodes requested; wrote an empty report")
    else:
        print(f"mean success {report['mean_success']:.3f} +/- {report['std_success']:.3f} over seeds {report['seeds']}")
        for name, row in report["per_task"].items():
            stages = " ".join(f"{s:.2f}" for s in row["stage_completion"])
            print(f"  {name:8s} {row['success_mean']:.3f}  stages [{stages}]")
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    echo_config(cfg, out)
    skills = SkillAutoencoder.load(args.stage1)
    chunks = pipeline.stage1_chunks(cfg)
    res = pipeline.analyze_codes(skills, chunks)
    pipeline.write_matrix_csv(out / "usage_histogram.csv", res.histogram, "depth", "code_")
    if args.metrics is not None:
        import csv

        with open(args.metrics) as fh:
            rows = [(r["epoch"], r["quant_l1"]) for r in csv.DictReader(fh)]
        (out / "quant_loss_curve.csv").write_text("epoch,quant_l1\n" + "".join(f"{e},{q}\n" for e, q in rows))
    if res.conditional is None:
        print(f"notice: depth {skills.cfg.depth} < 2, skipping the P(k2|k1) export")
        return EXIT_OK
    pipeline.write_matrix_csv(out / "conditional_k2_given_k1.csv", res.conditional, "k1", "k2_")
    (out / "row_entropy.csv").write_text(
        "k1,entropy_nats\n" + "".join(f"{i},{'nan' if np.isnan(h) else f'{h:.10g}'}\n" for i, h in enumerate(res.entropy)))
    (out / "independence.json").write_text(json.dumps(res.independence, indent=2) + "\n")
    print(f"chi-square {res.independence['chi2']:.1f} (dof {res.independence['dof']}), "
          f"p = {res.independence['p_value']:.3g}; exports in {out}")
    return EXIT_OK


COMPARE_VARIANTS = (
    ("full", "rotation", None),
    ("w/o rotation", "ste", None),
    ("w/o rotation & AR", "ste", "no-ar"),
    ("w/o AR", "rotation", "no-ar"),
    ("w/o refinement", "rotation", "no-refine"),
)


def cmd_compare(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    echo_config(cfg, out)
    syn = dataclasses.replace(cfg, data="synthetic")
    chunks = pipeline.stage1_chunks(syn)
    lines = ["mode,active_codes_d1,perplexity_d1,quant_l1"]
    for mode in MODES:
        c = dataclasses.replace(syn, stage1=dataclasses.replace(syn.stage1, mode=mode))
        last = pipeline.fit_stage1(c, chunks, out / f"synthetic_{mode}_metrics.csv").metrics[-1]
        lines.append(f"{mode},{last['active_codes_d1']},{last['perplexity_d1']:.6g},{last['quant_l1']:.6g}")
    (out / "codebook_comparison.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))

    demos = pipeline.demonstrations(cfg)
    demo_chunks = pipeline.stage1_chunks(cfg, demos)
    skills = {}
    rows = ["variant,mean_success,std_success," + ",".join(t["name"] for t in demos.meta["tasks"])]
    for name, mode, ablation in COMPARE_VARIANTS:
        if mode not in skills:
            c = dataclasses.replace(cfg, stage1=dataclasses.replace(cfg.stage1, mode=mode))
            skills[mode] = pipeline.fit_stage1(c, demo_chunks).model
        c = pipeline.apply_ablation(cfg, ablation)
        policy = pipeline.fit_policy(c, skills[mode], demos).policy
        rep = pipeline.evaluate(policy, cfg.eval.episodes, cfg.eval.seeds, cfg.sampling, cfg.cst.history,
                                cfg.eval.replan_every)
        per_task = ",".join(f"{v['success_mean']:.4f}" for v in rep["per_task"].values())
        rows.append(f"{name},{rep['mean_success']:.4f},{rep['std_success']:.4f},{per_task}")
        print(rows[-1], flush=True)
    (out / "ablation_table.csv").write_text("\n".join(rows) + "\n")
    return EXIT_OK


COMMANDS = {
    "train-rarsq": cmd_train_rarsq,
    "train-cst": cmd_train_cst,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get("RARSQ_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointMismatch as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
