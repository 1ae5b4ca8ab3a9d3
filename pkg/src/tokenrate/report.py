"""Run-directory report: text tables, a CSV summary and PNG figures."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from . import cost
from .schedule import CompressionSchedule
from .search import SearchTrace
from .vit import ModelConfig

REQUIRED = ("config.json", "backbone.drck", "schedule.json", "trace.csv")


class MissingArtifacts(FileNotFoundError):
    def __init__(self, run_dir: Path, missing: list[str]):
        super().__init__(f"{run_dir}: missing artifacts: {', '.join(missing)}")
        self.missing = missing


def overhead_rows(token_count: int, depth: int) -> list[tuple[str, float]]:
    """Closed-form cost of the search machinery itself."""
    return [
        ("overhead_parameters", cost.overhead_parameters(token_count, depth)),
        ("overhead_flops", cost.overhead_flops(token_count, depth)),
    ]


def _plot_trace(trace: SearchTrace, target: float | None, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [r["step"] for r in trace.rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    axes[0].plot(steps, [r["L_cls"] for r in trace.rows], lw=0.8, label="classification")
    axes[0].plot(steps, [r["L_f"] for r in trace.rows], lw=0.8, label="FLOPs")
    axes[0].set_yscale("log")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].legend(frameon=False)
    axes[1].plot(steps, [r["F"] for r in trace.rows], lw=0.8, label="hard schedule")
    axes[1].plot(steps, [r["F_expected"] for r in trace.rows], lw=0.8, label="expected")
    if target:
        axes[1].axhline(target, color="k", ls="--", lw=0.8, label="target")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("MACs per image")
    axes[1].legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_kept(schedule: CompressionSchedule, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    blocks = np.arange(1, schedule.depth + 1)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.step(blocks, schedule.prune_kept, where="mid", label="after pruning")
    ax.step(blocks, schedule.merge_kept, where="mid", label="after merging")
    ax.plot(blocks, schedule.effective_counts(), "ko", ms=3, label="running")
    ax.set_xlabel("block")
    ax.set_ylabel("kept tokens")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_pareto(rows: list[dict], ours: tuple[float, float] | None, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.scatter([float(r["flops"]) for r in rows], [float(r["accuracy"]) for r in rows], s=4, c="0.6",
               label="random schedules")
    if ours is not None:
        ax.scatter([ours[0]], [ours[1]], marker="*", s=80, c="C3", label="searched")
    ax.set_xlabel("MACs per image")
    ax.set_ylabel("accuracy")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def report(run_dir) -> dict:
    """Write ``report.txt``, ``summary.csv`` and figures into ``run_dir``.

    Raises MissingArtifacts listing every required file that is absent.
    """
    run = Path(run_dir)
    missing = [name for name in REQUIRED if not (run / name).is_file()]
    if missing:
        raise MissingArtifacts(run, missing)
    conf = json.loads((run / "config.json").read_text())
    cfg = ModelConfig.from_dict(conf["model"])
    schedule = CompressionSchedule.load(run / "schedule.json")
    trace = SearchTrace.read_csv(run / "trace.csv")
    metrics = json.loads((run / "metrics.json").read_text()) if (run / "metrics.json").is_file() else {}

    base = cost.baseline_flops(cfg)
    flops = cost.schedule_flops(schedule, cfg)
    target = schedule.provenance.get("target_flops")
    summary: list[tuple[str, object]] = [
        ("token_count", cfg.token_count),
        ("depth", cfg.depth),
        ("embed_dim", cfg.embed_dim),
        ("baseline_flops", base),
        ("schedule_flops", flops),
        ("flops_ratio", flops / base),
        ("target_flops", target if target is not None else ""),
        ("prune_kept", " ".join(map(str, schedule.prune_kept))),
        ("merge_kept", " ".join(map(str, schedule.merge_kept))),
        ("running_kept", " ".join(map(str, schedule.effective_counts()))),
        ("search_steps", len(trace)),
    ]
    present = {k for k, _ in summary}
    summary += [(k, metrics[k]) for k in sorted(metrics) if k not in present]
    cm = cost.CostModel.load()
    lat, pw = cm.schedule_metrics(schedule)
    summary += [("latency_ms_reference_hw", lat), ("power_mw_reference_hw", pw)]
    summary += overhead_rows(cfg.token_count, cfg.depth)
    ref_n, ref_l = 196, 12
    summary += [
        ("overhead_parameters_N196_L12", cost.overhead_parameters(ref_n, ref_l)),
        ("overhead_flops_N196_L12", cost.overhead_flops(ref_n, ref_l)),
    ]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    for k, v in summary:
        w.writerow([k, v])
    (run / "summary.csv").write_text(buf.getvalue())

    lines = ["Run report", ""]
    lines.append(f"{'block':>5} {'in':>4} {'pruned to':>9} {'merged to':>9}")
    for l, (n_in, n_p, n_m) in enumerate(schedule.stage_counts()):
        lines.append(f"{l + 1:>5} {n_in:>4} {n_p:>9} {n_m:>9}")
    lines.append("")
    width = max(len(k) for k, _ in summary)
    for k, v in summary:
        lines.append(f"{k:<{width}}  {v}")
    (run / "report.txt").write_text("\n".join(lines) + "\n")

    figures = ["trace.png", "kept.png"]
    _plot_trace(trace, target, run / "trace.png")
    _plot_kept(schedule, run / "kept.png")
    if (run / "enumerate.csv").is_file():
        with open(run / "enumerate.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        ours = (flops, metrics["accuracy"]) if "accuracy" in metrics else None
        _plot_pareto(rows, ours, run / "pareto.png")
        figures.append("pareto.png")
    return {"summary": dict(summary), "figures": figures}
