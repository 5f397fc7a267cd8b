"""Command-line entry point: ``asanet <subcommand>`` or ``python -m asanet``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import checkpoint as ckpt_io
from .ablation import (
    ablate_modules,
    ablate_stages,
    cloud_benchmark_from_manifest,
    format_cloud_table,
    project_makespan,
)
from .complexity import bench
from .data import SceneSpec, load_manifest, load_split, make_dataset
from .errors import AsanetError
from .gradsuite import run_suite
from .metrics import format_report
from .network import NetConfig
from .train import TrainConfig, evaluate, save_checkpoint, train, write_log


def _class_names(data_dir) -> Optional[List[str]]:
    try:
        return load_manifest(data_dir)["class_names"]
    except (OSError, KeyError):
        return None


def cmd_gen_data(args) -> int:
    spec = SceneSpec.with_classes(args.classes, size=args.size, cloud_coverage=args.cloud, seed=args.seed)
    manifest = make_dataset(spec, args.n, args.out)
    print(f"wrote {manifest['num_samples']} scenes to {args.out} ({len(manifest['train'])} train / {len(manifest['val'])} val)")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config)
    if args.data:
        cfg.data = args.data
    result = train(cfg)
    save_checkpoint(result.checkpoint, args.out)
    if args.log:
        write_log(result.log, args.log)
    print(f"best val mIoU {100 * result.checkpoint.best_miou:.2f} at iteration {result.checkpoint.iteration}")
    return 0


def cmd_eval(args) -> int:
    ck = ckpt_io.load(args.ckpt)
    split = load_split(args.data, args.split)
    s = evaluate(ck, split, args.png_dir)
    text = format_report(s, _class_names(args.data), title=f"{args.ckpt} on {args.data}:{args.split}")
    if args.report:
        Path(args.report).write_text(text)
    print(text, end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = TrainConfig.from_file(args.config)
    if args.data:
        cfg.data = args.data
    seeds = list(range(args.seeds))
    run = ablate_modules if args.suite == "modules" else ablate_stages
    table = run(cfg, seeds, workers=args.workers)
    title = f"{args.suite} ablation, {cfg.iterations} iterations"
    text = table.format(_class_names(cfg.data), title)
    text += f"compute {table.total_seconds / 60:.1f} CPU-min; 4-worker makespan {project_makespan(table.durations()) / 60:.1f} min\n"
    Path(args.out).write_text(table.to_csv(cfg.net.num_classes))
    if args.report:
        Path(args.report).write_text(text)
    if args.ckpt_dir:
        out = Path(args.ckpt_dir)
        out.mkdir(parents=True, exist_ok=True)
        for label, runs in table.runs.items():
            for r in runs:
                safe = label.replace("+", "_").replace("{", "s").replace("}", "").replace(",", "")
                save_checkpoint(r.checkpoint, out / f"{safe}_seed{r.seed}.ckpt")
    print(text, end="")
    return 0


def cmd_cloud_bench(args) -> int:
    coverages = [float(c) for c in args.coverages.split(",")]
    groups = {}
    for path in args.ckpt:
        ck = ckpt_io.load(path)
        label = ck.config.get("net", {}).get("mode", Path(path).stem)
        groups.setdefault(label, []).append(ck)
    result = cloud_benchmark_from_manifest(groups, args.data, coverages)
    print(format_cloud_table(result, coverages), end="")
    return 0


def cmd_gradcheck(args) -> int:
    results, seconds = run_suite(args.seed, verbose=True)
    failed = [name for name, rep in results if not rep.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {seconds:.1f} s")
    return 1 if failed else 0


def cmd_bench(args) -> int:
    net = TrainConfig.from_file(args.config).net if args.config else NetConfig()
    for row in bench(net, batch=args.batch):
        print(row)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asanet", description="RGB-SAR fusion segmentation on a numpy autograd engine")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic RGB/SAR dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=1024)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--cloud", type=float, default=0.4, help="cloud coverage in [0, 1]")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="CSV of iter, loss, val_miou")
    t.add_argument("--data", help="override the dataset directory in the config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=["train", "val"])
    e.add_argument("--report")
    e.add_argument("--png-dir")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="fusion-module or per-stage ablation table")
    a.add_argument("--suite", required=True, choices=["modules", "stages"])
    a.add_argument("--config", required=True)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--out", required=True, help="per-run CSV")
    a.add_argument("--report", help="formatted median table")
    a.add_argument("--data")
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--ckpt-dir", help="also keep every trained checkpoint")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("cloud-bench", help="mIoU against cloud coverage for fixed checkpoints")
    c.add_argument("--ckpt", nargs="+", required=True)
    c.add_argument("--data", required=True, help="dataset whose manifest defines the val scenes")
    c.add_argument("--coverages", default="0,0.2,0.4,0.6")
    c.set_defaults(func=cmd_cloud_bench)

    gc = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="FLOPs, parameters and throughput per fusion variant")
    b.add_argument("--config", help="JSON config whose net section sets the geometry")
    b.add_argument("--batch", type=int, default=8)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except AsanetError as exc:
        print(f"asanet {args.command}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"asanet {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
