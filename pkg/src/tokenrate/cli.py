"""Command-line entry point.

Every subcommand reads the run configuration, writes its artifacts into the
``--out`` directory (together with the effective ``config.json``) and exits
with 0 on success, 2 on a configuration error, 3 on an infeasible target and
4 on an I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cost
from .config import ConfigError, RunConfig, load_config
from .data import ToyDataset, gen_dataset, ingest_idx, write_idx
from .render import write_token_map
from .report import MissingArtifacts, report
from .schedule import CompressionSchedule
from .search import InfeasibleTarget, cosearch_hw, enumerate_schedules, finetune, search_rates
from .tokens import ScheduleCompressor, apply_schedule
from .train import train_backbone
from .vit import accuracy, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("tokenrate")

PRESETS = {
    "vit-s": dict(depth=12, embed_dim=384, heads=6, patch_size=16, image_size=224, channels=3, classes=1000),
    "vit-b": dict(depth=12, embed_dim=768, heads=12, patch_size=16, image_size=224, channels=3, classes=1000),
}


# --- helpers -------------------------------------------------------------------


def _config(args) -> RunConfig:
    rc = load_config(args.config)
    if args.seed is not None:
        rc = rc.with_seed(args.seed)
    s = rc.search
    if args.target_flops is not None:
        s = dataclasses.replace(s, target_flops=args.target_flops)
    if args.target_latency is not None:
        s = dataclasses.replace(s, target_latency=args.target_latency)
    if args.target_power is not None:
        s = dataclasses.replace(s, target_power=args.target_power)
    return dataclasses.replace(rc, search=s)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, rc: RunConfig) -> None:
    (out / "config.json").write_text(rc.dumps())


def _datasets(rc: RunConfig, args) -> tuple[ToyDataset, ToyDataset]:
    if getattr(args, "data", None):
        d = Path(args.data)
        train = ingest_idx(d / "train-images.idx", d / "train-labels.idx", "train")
        val = ingest_idx(d / "val-images.idx", d / "val-labels.idx", "val")
        return train, val
    r = rc.data.recipe
    train = gen_dataset(dataclasses.replace(r, count=rc.data.train_count), rc.data.train_seed, "train")
    val = gen_dataset(dataclasses.replace(r, count=rc.data.val_count), rc.data.val_seed, "val")
    return train, val


def _backbone(args, out: Path):
    path = Path(args.backbone) if getattr(args, "backbone", None) else out / "backbone.drck"
    cfg, params, meta, _ = load_checkpoint(path)
    return cfg, params


def _schedule(args, out: Path) -> CompressionSchedule:
    path = Path(args.schedule) if getattr(args, "schedule", None) else out / "schedule.json"
    return CompressionSchedule.load(path)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


def _cost_model(rc: RunConfig) -> cost.CostModel:
    return cost.CostModel.load(rc.hw.cost_model)


# --- subcommands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    rc = _config(args)
    out = _out(args)
    train, val = _datasets(rc, args)
    write_idx(train, out / "train-images.idx", out / "train-labels.idx")
    write_idx(val, out / "val-images.idx", out / "val-labels.idx")
    _write_config(out, rc)
    print(f"wrote {len(train)} training and {len(val)} validation images to {out}")
    return EXIT_OK


def cmd_train_backbone(args) -> int:
    rc = _config(args)
    out = _out(args)
    train, val = _datasets(rc, args)
    ck = out / "backbone.drck"
    res = train_backbone(train.images, train.labels, rc.model, rc.train, (val.images, val.labels), ck,
                         resume=args.resume)
    _write_config(out, rc)
    _write_json(out / "train_metrics.json", {"val_accuracy": res.val_accuracy, "epochs": res.epochs_done,
                                              "final_loss": res.losses[-1] if res.losses else None})
    print(f"validation accuracy {res.val_accuracy:.4f}")
    return EXIT_OK


def _search_outputs(out: Path, rc: RunConfig, res, params, val, extra: dict | None = None) -> None:
    cfg = rc.model
    res.schedule.save(out / "schedule.json")
    res.trace.save(out / "trace.csv")
    comp = ScheduleCompressor(res.schedule, rc.search.metric, rc.search.option)
    base_acc = accuracy(val.images, val.labels, params, cfg)
    acc = accuracy(val.images, val.labels, params, cfg, comp)
    metrics = {
        "accuracy": acc,
        "baseline_accuracy": base_acc,
        "flops": res.flops,
        "baseline_flops": cost.baseline_flops(cfg),
        "target_flops": rc.search.resolve_target(cfg),
    }
    metrics.update(extra or {})
    _write_json(out / "metrics.json", metrics)
    _write_config(out, rc)
    print(f"schedule prune={res.schedule.prune_kept} merge={res.schedule.merge_kept}")
    print(f"FLOPs {res.flops} ({res.flops / metrics['baseline_flops']:.3f} of baseline), accuracy {acc:.4f}")


def cmd_search(args) -> int:
    rc = _config(args)
    out = _out(args)
    cfg, params = _backbone(args, out)
    train, val = _datasets(rc, args)
    cm = _cost_model(rc) if (rc.search.target_latency or rc.search.target_power) else None
    res = search_rates(params, train.images, train.labels, cfg, rc.search, cm)
    extra = {}
    if cm is not None:
        extra["latency_ms"], extra["power_mw"] = cm.schedule_metrics(res.schedule)
    _search_outputs(out, rc, res, params, val, extra)
    return EXIT_OK


def cmd_cosearch_hw(args) -> int:
    rc = _config(args)
    if rc.search.target_latency is None and rc.search.target_power is None:
        raise ConfigError("cosearch-hw needs --target-latency and/or --target-power")
    out = _out(args)
    cfg, params = _backbone(args, out)
    train, val = _datasets(rc, args)
    cm = _cost_model(rc)
    res = cosearch_hw(params, train.images, train.labels, cfg, rc.search, cm)
    lat, pw = cm.schedule_metrics(res.schedule, res.hw)
    _write_json(out / "hw.json", res.hw.to_dict())
    _search_outputs(out, rc, res, params, val, {"latency_ms": lat, "power_mw": pw})
    print(f"hardware {res.hw.to_dict()} latency {lat:.2f} ms power {pw:.1f} mW")
    return EXIT_OK


def cmd_apply(args) -> int:
    rc = _config(args)
    out = _out(args)
    cfg, params = _backbone(args, out)
    sched = _schedule(args, out)
    _, val = _datasets(rc, args)
    res = apply_schedule(params, sched, val.images, cfg, rc.search.metric, rc.search.option)
    acc = float((res.logits.data.argmax(axis=1) == val.labels).mean())
    _write_json(out / "apply.json", {"accuracy": acc, "token_counts": res.token_counts, "macs_blocks": res.macs,
                                     "flops_model": cost.schedule_flops(sched, cfg)})
    print(f"accuracy {acc:.4f}  token counts {res.token_counts}  block MACs {res.macs}")
    return EXIT_OK


def cmd_flops(args) -> int:
    rc = _config(args)
    from .vit import ModelConfig

    cfg = ModelConfig(**PRESETS[args.preset]) if args.preset else rc.model
    if args.schedule:
        sched = CompressionSchedule.load(args.schedule)
    else:
        sched = CompressionSchedule.zero(cfg.token_count, cfg.depth)
    if sched.token_count != cfg.token_count or sched.depth != cfg.depth:
        raise ConfigError(f"schedule (N={sched.token_count}, L={sched.depth}) does not fit the model")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "tokens_in", "tokens_out", "macs"])
    prev = cfg.token_count
    for l, c in enumerate(sched.effective_counts()):
        w.writerow([l + 1, prev, c, cost.block_macs(prev, c, cfg.embed_dim)])
        prev = c
    total = cost.schedule_flops(sched, cfg)
    w.writerow(["total", "", "", total])
    w.writerow(["total_with_stem", "", "", total + cost.stem_macs(cfg)])
    text = buf.getvalue()
    if args.out:
        out = _out(args)
        (out / "flops.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_enumerate(args) -> int:
    rc = _config(args)
    out = _out(args)
    cfg, params = _backbone(args, out)
    _, val = _datasets(rc, args)
    target = rc.search.resolve_target(cfg)
    if target < cost.minimum_flops(cfg):
        raise InfeasibleTarget(target, cost.minimum_flops(cfg))
    res = enumerate_schedules(params, cfg, val.images, val.labels, target, samples=rc.enumerate.samples,
                              seed=rc.search.seed, option=rc.search.option, metric=rc.search.metric,
                              max_draws=rc.enumerate.max_draws)
    (out / "enumerate.csv").write_text(res.to_csv())
    _write_config(out, rc)
    if res.partial:
        print(f"warning: only {len(res.scores)} feasible schedules found in {res.draws} draws")
    if res.best is not None:
        print(f"best accuracy {res.best.accuracy:.4f} at {res.best.flops} MACs over {len(res.scores)} schedules")
    return EXIT_OK


def cmd_finetune(args) -> int:
    rc = _config(args)
    out = _out(args)
    cfg, params = _backbone(args, out)
    sched = _schedule(args, out)
    train, val = _datasets(rc, args)
    f = rc.finetune
    comp = ScheduleCompressor(sched, rc.search.metric, rc.search.option)
    before = accuracy(val.images, val.labels, params, cfg, comp)
    tuned, losses = finetune(params, sched, train.images, train.labels, cfg, f.epochs, f.lr, f.min_lr,
                             f.weight_decay, f.batch_size, rc.search.seed, rc.search.option, rc.search.metric)
    after = accuracy(val.images, val.labels, tuned, cfg, comp)
    save_checkpoint(out / "finetuned.drck", cfg, tuned, {"schedule": sched.to_dict()})
    _write_json(out / "finetune.json", {"accuracy_before": before, "accuracy_after": after, "epochs": f.epochs})
    _write_config(out, rc)
    print(f"accuracy {before:.4f} -> {after:.4f}")
    return EXIT_OK


def cmd_render(args) -> int:
    rc = _config(args)
    out = _out(args)
    cfg, params = _backbone(args, out)
    sched = _schedule(args, out)
    _, val = _datasets(rc, args)
    if not 0 <= args.index < len(val):
        raise ConfigError(f"image index {args.index} outside 0..{len(val) - 1}")
    blocks = range(cfg.depth) if args.block is None else [args.block]
    res = apply_schedule(params, sched, val.images[args.index : args.index + 1], cfg, rc.search.metric,
                         rc.search.option, record=True)
    for b in blocks:
        if not 0 <= b < cfg.depth:
            raise ConfigError(f"block {b} outside 0..{cfg.depth - 1}")
        write_token_map(out / f"tokens_img{args.index}_block{b + 1}.ppm", val.images[args.index], res.records, b,
                        cfg.patch_size)
    print(f"rendered {len(blocks)} token maps")
    return EXIT_OK


def cmd_report(args) -> int:
    res = report(args.out)
    print(Path(args.out, "report.txt").read_text(), end="")
    print("figures: " + ", ".join(res["figures"]))
    return EXIT_OK


# --- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="seed applied to training and search")
    common.add_argument("--target-flops", type=float, help="FLOPs target in MACs per image")
    common.add_argument("--target-latency", type=float, help="latency target in ms")
    common.add_argument("--target-power", type=float, help="power target in mW")
    common.add_argument("--out", default="run", help="output (run) directory")
    common.add_argument("--data", help="directory with IDX files instead of generated data")
    common.add_argument("--backbone", help="checkpoint path (default OUT/backbone.drck)")
    common.add_argument("--schedule", help="schedule path (default OUT/schedule.json)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tokenrate", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset as IDX files")
    t = sub.add_parser("train-backbone", parents=[common], help="train the toy backbone")
    t.add_argument("--resume", action="store_true", help="continue from OUT/backbone.drck")
    sub.add_parser("search", parents=[common], help="search a compression schedule")
    sub.add_parser("cosearch-hw", parents=[common], help="search schedule and accelerator jointly")
    sub.add_parser("apply", parents=[common], help="evaluate a schedule off the shelf")
    f = sub.add_parser("flops", parents=[common], help="FLOPs of a schedule")
    f.add_argument("--preset", choices=sorted(PRESETS), help="use a standard model size instead of the config")
    sub.add_parser("enumerate", parents=[common], help="score random schedules under the FLOPs target")
    sub.add_parser("finetune", parents=[common], help="fine-tune the backbone under a schedule")
    r = sub.add_parser("render", parents=[common], help="write token maps as PPM images")
    r.add_argument("--index", type=int, default=0, help="validation image index")
    r.add_argument("--block", type=int, help="0-based block (default: all)")
    sub.add_parser("report", parents=[common], help="summarise a run directory")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-backbone": cmd_train_backbone,
    "search": cmd_search,
    "cosearch-hw": cmd_cosearch_hw,
    "apply": cmd_apply,
    "flops": cmd_flops,
    "enumerate": cmd_enumerate,
    "finetune": cmd_finetune,
    "render": cmd_render,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleTarget as exc:
        print(f"infeasible target: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except MissingArtifacts as exc:
        print(f"missing artifacts: {', '.join(exc.missing)}", file=sys.stderr)
        return EXIT_IO
    except (OSError, ValueError) as exc:
        if isinstance(exc, (OSError,)) or "truncated" in str(exc) or "magic" in str(exc) or "DRCK" in str(exc):
            print(f"I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
