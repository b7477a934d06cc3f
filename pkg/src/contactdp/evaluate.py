"""Evaluation harness and the ablation grid.

``evaluate`` rolls a policy over fresh episode seeds and aggregates success,
failure reasons, force traces and (optionally) attention-mass traces.
``ablation_grid`` trains any missing checkpoints and evaluates the grid of
{control mode} x {auxiliary target} x {parameterization} cells, emitting a
markdown and CSV table.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import generate_demos
from .runtime import run_episode
from .simworld import FAIL_EXCESSIVE_FORCE, PlanarContactSim, TaskSpec

logger = logging.getLogger(__name__)


@dataclass
class EpisodeSummary:
    seed: int
    success: bool
    failure_reason: str | None
    peak_force: float
    steps: int
    mean_wall_time: float


@dataclass
class EvalReport:
    n_episodes: int
    n_success: int
    failure_reasons: dict[str, int]
    episodes: list[EpisodeSummary]
    config_hash: str
    checkpoint: str | None = None
    mode: str = "closed_loop"
    task_kind: str = ""
    force_traces: list[np.ndarray] = field(default_factory=list, repr=False)
    attention: list[list[dict]] = field(default_factory=list, repr=False)

    @property
    def success_rate(self) -> float:
        return self.n_success / self.n_episodes if self.n_episodes else 0.0

    def excessive_force_failures(self) -> int:
        return self.failure_reasons.get(FAIL_EXCESSIVE_FORCE, 0)

    def to_dict(self) -> dict:
        return {
            "n_episodes": self.n_episodes,
            "n_success": self.n_success,
            "success_rate": self.success_rate,
            "failure_reasons": dict(self.failure_reasons),
            "episodes": [dataclasses.asdict(e) for e in self.episodes],
            "config_hash": self.config_hash,
            "checkpoint": self.checkpoint,
            "mode": self.mode,
            "task_kind": self.task_kind,
        }

    def save(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / "report.json"
        report_path.write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        traces_dir = out_dir / "traces"
        traces_dir.mkdir(exist_ok=True)
        for i, trace in enumerate(self.force_traces):
            _write_trace_csv(traces_dir / f"trace_{i:04d}.csv", trace)
        if self.attention:
            (out_dir / "attention.json").write_text(
                json.dumps(self.attention, indent=2) + "\n", encoding="utf-8"
            )
        return report_path

    @classmethod
    def load(cls, out_dir: str | Path) -> "EvalReport":
        out_dir = Path(out_dir)
        d = json.loads((out_dir / "report.json").read_text(encoding="utf-8"))
        traces = []
        traces_dir = out_dir / "traces"
        if traces_dir.is_dir():
            for f in sorted(traces_dir.glob("trace_*.csv")):
                traces.append(np.loadtxt(f, delimiter=",", skiprows=1))
        attention = []
        att_file = out_dir / "attention.json"
        if att_file.exists():
            attention = json.loads(att_file.read_text(encoding="utf-8"))
        return cls(
            n_episodes=d["n_episodes"],
            n_success=d["n_success"],
            failure_reasons=d["failure_reasons"],
            episodes=[EpisodeSummary(**e) for e in d["episodes"]],
            config_hash=d["config_hash"],
            checkpoint=d.get("checkpoint"),
            mode=d.get("mode", "closed_loop"),
            task_kind=d.get("task_kind", ""),
            force_traces=traces,
            attention=attention,
        )


def _write_trace_csv(path: Path, trace: np.ndarray) -> None:
    header = "time," + ",".join(f"f{i}" for i in range(trace.shape[1] - 1))
    np.savetxt(path, trace, delimiter=",", header=header, comments="")


def evaluate(
    checkpoint,
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    n_episodes: int | None = None,
    mode: str | None = None,
    seed: int | None = None,
    export_attention: bool | None = None,
) -> EvalReport:
    """Evaluate a checkpoint path or an in-memory policy object.

    Checkpoints are refused when their training-relevant config sections
    (task, horizons, model, diffusion, compliance, aux) disagree with the
    evaluation config.
    """
    checkpoint_name = None
    if isinstance(checkpoint, (str, Path)):
        from .train import load_policy

        policy, ckpt = load_policy(checkpoint)
        if ckpt["training_signature"] != config.training_signature():
            raise ValueError(
                "checkpoint/config mismatch: the checkpoint was trained with "
                f"signature {ckpt['training_signature']} but the evaluation config "
                f"has {config.training_signature()}; refusing to run"
            )
        checkpoint_name = str(checkpoint)
    else:
        policy = checkpoint

    n_episodes = config.eval.n_episodes if n_episodes is None else n_episodes
    mode = config.eval.mode if mode is None else mode
    seed = config.eval.seed if seed is None else seed
    export_attention = (
        config.eval.export_attention if export_attention is None else export_attention
    )

    summaries: list[EpisodeSummary] = []
    reasons: Counter = Counter()
    traces: list[np.ndarray] = []
    attention: list[list[dict]] = []
    n_success = 0
    for i in range(n_episodes):
        ep_seed = seed + i
        sim = PlanarContactSim(config.task)
        record, metrics = run_episode(
            policy,
            sim,
            config.horizons,
            ep_seed,
            mode=mode,
            compliance_params=config.compliance,
            config_hash=config.config_hash(),
            collect_attention=export_attention,
        )
        if metrics["success"]:
            n_success += 1
        else:
            reasons[metrics["failure_reason"]] += 1
        wall = metrics["wall_times"]
        summaries.append(
            EpisodeSummary(
                seed=ep_seed,
                success=metrics["success"],
                failure_reason=metrics["failure_reason"],
                peak_force=float(metrics["peak_force"]),
                steps=metrics["steps"],
                mean_wall_time=float(np.mean(wall)) if wall else 0.0,
            )
        )
        traces.append(
            np.concatenate([record.timestamps[:, None], record.force], axis=1)
        )
        if export_attention:
            attention.append(
                [
                    {
                        "force_mass": a["masses"]["fast"],
                        "visual_mass": a["masses"]["slow"],
                        "self_mass": a["masses"]["self"],
                        "in_contact": bool(a["penetration"] > 0.0),
                    }
                    for a in metrics["attention"]
                ]
            )
        logger.info(
            "episode %d/%d seed=%d success=%s reason=%s peak=%.2fN",
            i + 1, n_episodes, ep_seed, metrics["success"], metrics["failure_reason"],
            metrics["peak_force"],
        )

    report = EvalReport(
        n_episodes=n_episodes,
        n_success=n_success,
        failure_reasons=dict(reasons),
        episodes=summaries,
        config_hash=config.config_hash(),
        checkpoint=checkpoint_name,
        mode=mode,
        task_kind=config.task.kind,
        force_traces=traces,
        attention=attention,
    )
    if out_dir is not None:
        report.save(out_dir)
    return report


# -- ablation grid -------------------------------------------------------------

# (control mode, auxiliary target, parameterization); the first entry is the
# full method, the open-loop rows are the no-fast-feedback baselines.
DEFAULT_CELLS = (
    ("closed_loop", "virtual_target", "velocity"),
    ("open_loop", "virtual_target", "velocity"),
    ("open_loop", "none", "velocity"),
    ("closed_loop", "force", "velocity"),
    ("closed_loop", "none", "velocity"),
    ("closed_loop", "virtual_target", "epsilon"),
    ("closed_loop", "virtual_target", "sample"),
)


def cell_config(base: ExperimentConfig, task_kind: str, aux: str, parameterization: str) -> ExperimentConfig:
    task = base.task if base.task.kind == task_kind else _default_task(task_kind, base.task)
    return base.replace(
        task=task,
        aux=aux,
        diffusion=dataclasses.replace(base.diffusion, parameterization=parameterization),
    )


def _default_task(kind: str, template: TaskSpec) -> TaskSpec:
    if kind == "push_hold":
        return dataclasses.replace(template, kind=kind, force_limit=14.0)
    return dataclasses.replace(template, kind=kind, force_limit=20.0)


def ensure_demos(config: ExperimentConfig, out_dir: Path, n: int = 40) -> Path:
    demo_dir = out_dir / f"demos_{config.task.kind}"
    if not (demo_dir / "manifest.json").exists():
        logger.info("generating %d demos for %s", n, config.task.kind)
        generate_demos(
            config.task, n, seed=config.train.seed, out_dir=demo_dir,
            compliance_params=config.compliance, config_hash=config.config_hash(),
        )
    return demo_dir


def ensure_checkpoint(config: ExperimentConfig, out_dir: Path, demo_dir: Path) -> Path:
    from .train import train

    name = f"ckpt_{config.task.kind}_{config.aux}_{config.diffusion.parameterization}"
    ckpt_path = out_dir / name / "checkpoint.pt"
    if not ckpt_path.exists():
        logger.info("training missing checkpoint %s", name)
        train(config, demo_dir, out_dir / name)
    return ckpt_path


def ablation_grid(
    base_config: ExperimentConfig,
    out_dir: str | Path,
    tasks: tuple[str, ...] | None = None,
    cells: tuple[tuple[str, str, str], ...] = DEFAULT_CELLS,
    n_episodes: int | None = None,
    n_demos: int = 40,
) -> dict[tuple[str, str, str, str], EvalReport]:
    """Train-if-missing and evaluate every grid cell; returns reports keyed by
    (task, mode, aux, parameterization) and writes grid.md / grid.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = tasks or (base_config.task.kind,)
    results: dict[tuple[str, str, str, str], EvalReport] = {}

    for task_kind in tasks:
        for mode, aux, param in cells:
            cfg = cell_config(base_config, task_kind, aux, param)
            demo_dir = ensure_demos(cfg, out_dir, n=n_demos)
            ckpt = ensure_checkpoint(cfg, out_dir, demo_dir)
            cell_dir = out_dir / f"eval_{task_kind}_{mode}_{aux}_{param}"
            if (cell_dir / "report.json").exists():
                report = EvalReport.load(cell_dir)
            else:
                report = evaluate(ckpt, cfg, out_dir=cell_dir, mode=mode, n_episodes=n_episodes)
            results[(task_kind, mode, aux, param)] = report
            logger.info(
                "cell %s/%s/%s/%s: %d/%d",
                task_kind, mode, aux, param, report.n_success, report.n_episodes,
            )

    _write_grid_tables(results, cells, tasks, out_dir)
    return results


def _write_grid_tables(results, cells, tasks, out_dir: Path) -> None:
    rows = []
    for key, report in results.items():
        task_kind, mode, aux, param = key
        rows.append(
            {
                "task": task_kind,
                "mode": mode,
                "aux": aux,
                "parameterization": param,
                "success": f"{report.n_success}/{report.n_episodes}",
                "success_rate": f"{report.success_rate:.2f}",
                "excessive_force": report.excessive_force_failures(),
            }
        )
    # enumerate the full cross product so untrained combinations are explicit
    all_modes = ("closed_loop", "open_loop")
    all_aux = ("none", "force", "virtual_target")
    all_params = ("epsilon", "sample", "velocity")
    skipped = [
        (t, m, a, p)
        for t in tasks
        for m in all_modes
        for a in all_aux
        for p in all_params
        if (t, m, a, p) not in results
    ]

    header = "| task | mode | aux | parameterization | success | rate | excessive-force fails |"
    sep = "|" + "---|" * 7
    lines = [header, sep]
    for r in rows:
        lines.append(
            f"| {r['task']} | {r['mode']} | {r['aux']} | {r['parameterization']} "
            f"| {r['success']} | {r['success_rate']} | {r['excessive_force']} |"
        )
    if skipped:
        lines.append("")
        lines.append(f"Skipped cells ({len(skipped)}): " + ", ".join("/".join(s) for s in skipped))
    (out_dir / "grid.md").write_text("\n".join(lines) + "\n", encoding="utf-8")

    csv_lines = ["task,mode,aux,parameterization,success,total,excessive_force"]
    for key, report in results.items():
        t, m, a, p = key
        csv_lines.append(
            f"{t},{m},{a},{p},{report.n_success},{report.n_episodes},{report.excessive_force_failures()}"
        )
    (out_dir / "grid.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
