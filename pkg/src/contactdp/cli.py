"""Command-line interface: demo generation, training, evaluation, ablation,
plotting, and artifact inspection."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "task", None):
        from .evaluate import _default_task

        cfg = cfg.replace(task=_default_task(args.task, cfg.task))
    if getattr(args, "aux", None):
        cfg = cfg.replace(aux=args.aux)
    if getattr(args, "parameterization", None):
        cfg = cfg.replace(
            diffusion=dataclasses.replace(cfg.diffusion, parameterization=args.parameterization)
        )
    if getattr(args, "steps", None):
        cfg = cfg.replace(train=dataclasses.replace(cfg.train, steps=args.steps))
    return cfg


def cmd_gen_demos(args) -> int:
    from .data import generate_demos

    cfg = _load_config(args)
    manifest = generate_demos(
        cfg.task,
        args.n,
        seed=args.seed if args.seed is not None else cfg.train.seed,
        out_dir=args.out,
        compliance_params=cfg.compliance,
        config_hash=cfg.config_hash(),
    )
    print(f"wrote {manifest['n_episodes']} episodes ({manifest['attempts']} attempts) to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .train import train

    cfg = _load_config(args)
    path = train(cfg, args.dataset, args.out, seed=args.seed)
    print(f"checkpoint written to {path}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate

    cfg = _load_config(args)
    report = evaluate(
        args.checkpoint,
        cfg,
        out_dir=args.out,
        n_episodes=args.episodes,
        mode=args.mode,
        seed=args.seed,
        export_attention=args.export_attention,
    )
    print(
        f"{report.task_kind} [{report.mode}]: {report.n_success}/{report.n_episodes} "
        f"success; failures: {report.failure_reasons}"
    )
    return 0


def cmd_ablate(args) -> int:
    from .evaluate import ablation_grid

    cfg = _load_config(args)
    results = ablation_grid(
        cfg, args.out, tasks=tuple(args.tasks) if args.tasks else None,
        n_episodes=args.episodes,
    )
    for key, report in results.items():
        print(f"{'/'.join(key)}: {report.n_success}/{report.n_episodes}")
    print(f"tables written to {args.out}/grid.md and grid.csv")
    return 0


def cmd_plot(args) -> int:
    from .evaluate import EvalReport
    from .plots import plot_traces

    cfg = _load_config(args)
    report = EvalReport.load(args.report)
    files = plot_traces(
        report,
        args.out,
        force_limit=cfg.task.force_limit,
        force_target=cfg.task.force_target,
        hold_band=cfg.task.hold_band,
    )
    print(f"wrote {len(files)} files to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.suffix == ".bin":
        from .data import episode_header

        print(json.dumps(episode_header(path), indent=2, sort_keys=True))
    elif path.suffix == ".pt":
        from .train import load_checkpoint

        ckpt = load_checkpoint(path)
        info = {
            "version": ckpt.get("version"),
            "config_hash": ckpt["config_hash"],
            "training_signature": ckpt["training_signature"],
            "dims": ckpt["dims"],
            "val_loss": ckpt.get("val_loss"),
            "final_loss": ckpt["loss_curve"][-1] if ckpt.get("loss_curve") else None,
            "aux": ckpt["config"].get("aux"),
            "task": ckpt["config"]["task"]["kind"],
        }
        print(json.dumps(info, indent=2, sort_keys=True))
    elif path.name.endswith(".json"):
        print(json.dumps(json.loads(path.read_text()), indent=2, sort_keys=True))
    else:
        print(f"don't know how to inspect {path}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contactdp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int, default=None)
        if out_required:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gen-demos", help="generate expert demonstrations")
    common(sp)
    sp.add_argument("--task", choices=["push_hold", "threshold_trigger"])
    sp.add_argument("--n", type=int, default=40)
    sp.set_defaults(fn=cmd_gen_demos)

    sp = sub.add_parser("train", help="train a policy on a demo dataset")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--aux", choices=["none", "force", "virtual_target"])
    sp.add_argument("--parameterization", choices=["epsilon", "sample", "velocity"])
    sp.add_argument("--steps", type=int)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=["closed_loop", "open_loop"])
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--export-attention", action="store_true")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="run the ablation grid")
    common(sp)
    sp.add_argument("--tasks", nargs="*", choices=["push_hold", "threshold_trigger"])
    sp.add_argument("--episodes", type=int)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("plot", help="plot traces from an eval report")
    common(sp)
    sp.add_argument("--report", required=True, help="eval report directory")
    sp.set_defaults(fn=cmd_plot)

    sp = sub.add_parser("inspect", help="print episode/checkpoint/manifest headers")
    sp.add_argument("--path", required=True)
    sp.set_defaults(fn=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
