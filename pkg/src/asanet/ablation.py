"""Ablation harnesses: fusion-module rows, per-stage masks, cloud robustness."""
from __future__ import annotations

import heapq
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import Checkpoint
from .data import SceneSpec, Split, load_manifest, load_split, render_split
from .metrics import csv_row, to_csv
from .network import NetConfig
from .train import TrainConfig, evaluate_split, train

log = logging.getLogger(__name__)

MODULE_ROWS = ("rgb-only", "sar-only", "pwa-only", "cfm-only", "sfm+pwa", "sfm+cfm")
STAGE_MASKS: Tuple[Tuple[int, ...], ...] = ((), (1,), (2,), (3,), (4,), (1, 2, 3, 4))
BASELINE = "pwa-only"


def mask_label(mask: Sequence[int]) -> str:
    return "{" + ",".join(str(s) for s in mask) + "}"


def module_config(base: TrainConfig, mode: str, seed: int) -> TrainConfig:
    net = replace(base.net, mode=mode, stage_mask=(1, 2, 3, 4))
    return replace(base, net=net, seed=seed)


def stage_config(base: TrainConfig, mask: Sequence[int], seed: int) -> TrainConfig:
    """SFM+CFM on the masked stages, PWA elsewhere; the empty mask is the PWA baseline."""
    mode = "sfm+cfm" if mask else BASELINE
    net = replace(base.net, mode=mode, stage_mask=tuple(mask) if mask else (1, 2, 3, 4))
    return replace(base, net=net, seed=seed)


@dataclass
class Run:
    label: str
    seed: int
    summary: dict
    checkpoint: Checkpoint
    seconds: float


@dataclass
class AblationTable:
    """Per-seed results for each row, in report order."""

    labels: List[str]
    runs: Dict[str, List[Run]] = field(default_factory=dict)
    baseline: str = BASELINE

    def median(self, label: str, key: str = "miou") -> float:
        return statistics.median(r.summary[key] for r in self.runs[label])

    def median_iou(self, label: str) -> List[float]:
        per = np.array([r.summary["iou"] for r in self.runs[label]], dtype=float)
        return [float(v) for v in np.median(per, axis=0)]

    def delta(self, label: str, key: str = "miou") -> float:
        return self.median(label, key) - self.median(self.baseline, key)

    @property
    def total_seconds(self) -> float:
        return sum(r.seconds for runs in self.runs.values() for r in runs)

    def durations(self) -> List[float]:
        return [r.seconds for runs in self.runs.values() for r in runs]

    def to_csv(self, num_classes: int) -> str:
        rows = [csv_row(lab, r.seed, r.summary) for lab in self.labels for r in self.runs[lab]]
        return to_csv(rows, num_classes)

    def format(self, class_names: Optional[Sequence[str]] = None, title: str = "") -> str:
        """Median-over-seeds table in points, deltas against the baseline in brackets."""
        k = len(next(iter(self.runs.values()))[0].summary["iou"])
        names = list(class_names) if class_names is not None else [f"c{i}" for i in range(k)]
        w = max(12, max(len(l) for l in self.labels) + 1)
        head = f"{'model':<{w}}" + "".join(f"{n:>9}" for n in names)
        head += "".join(f"{m:>17}" for m in ("Kappa", "OA", "mIoU"))
        lines = [title] if title else []
        lines += [head, "-" * len(head)]
        for lab in self.labels:
            cells = "".join("   absent" if v != v else f"{100 * v:9.2f}" for v in self.median_iou(lab))
            for key in ("kappa", "oa", "miou"):
                v = 100 * self.median(lab, key)
                d = "" if lab == self.baseline else f"({100 * self.delta(lab, key):+.2f})"
                cells += f"{v:>8.2f} {d:<8}"
            lines.append(f"{lab:<{w}}{cells}")
        seeds = sorted({r.seed for runs in self.runs.values() for r in runs})
        lines.append(f"medians over seeds {seeds}; deltas versus {self.baseline}")
        return "\n".join(lines) + "\n"


def _run_one(job) -> Run:
    label, cfg, train_split, val_split = job
    result = train(cfg, train_split, val_split)
    s, _ = evaluate_split(result.checkpoint.params, cfg.net, val_split)
    log.info("%s seed %d: mIoU %.4f (%.0f s)", label, cfg.seed, s["miou"], result.seconds)
    return Run(label, cfg.seed, s, result.checkpoint, result.seconds)


def _run_all(jobs, labels, baseline, workers: int) -> AblationTable:
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            runs = list(pool.map(_run_one, jobs))
    else:
        runs = [_run_one(j) for j in jobs]
    table = AblationTable(list(labels), {lab: [] for lab in labels}, baseline)
    for r in runs:
        table.runs[r.label].append(r)
    return table


def _splits(base: TrainConfig, train_split, val_split):
    if train_split is None:
        train_split = load_split(base.data, "train")
    if val_split is None:
        val_split = load_split(base.data, "val")
    return train_split, val_split


def ablate_modules(
    base: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    train_split: Optional[Split] = None,
    val_split: Optional[Split] = None,
    modes: Sequence[str] = MODULE_ROWS,
    workers: int = 1,
) -> AblationTable:
    """Train every fusion variant under identical seeds and budget."""
    train_split, val_split = _splits(base, train_split, val_split)
    jobs = [(m, module_config(base, m, s), train_split, val_split) for s in seeds for m in modes]
    return _run_all(jobs, modes, BASELINE, workers)


def ablate_stages(
    base: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    train_split: Optional[Split] = None,
    val_split: Optional[Split] = None,
    masks: Sequence[Sequence[int]] = STAGE_MASKS,
    workers: int = 1,
) -> AblationTable:
    """Fuse with SFM+CFM only at the masked stages; ``{}`` is the all-PWA baseline."""
    train_split, val_split = _splits(base, train_split, val_split)
    labels = [mask_label(m) for m in masks]
    jobs = [(mask_label(m), stage_config(base, m, s), train_split, val_split) for s in seeds for m in masks]
    return _run_all(jobs, labels, mask_label(()), workers)


def val_indices(manifest: dict) -> List[int]:
    return [int(name.split("_")[1].split(".")[0]) for name in manifest["val"]]


def cloud_robustness(
    checkpoints: Dict[str, List[Checkpoint]],
    spec: SceneSpec,
    indices: Sequence[int],
    coverages: Sequence[float] = (0.0, 0.2, 0.4, 0.6),
) -> Dict[str, List[List[dict]]]:
    """Re-render the optical rasters at each coverage and evaluate fixed checkpoints.

    Returns ``{label: [[summary per checkpoint] per coverage]}``.  Only the
    optical image depends on coverage; backscatter and labels are unchanged.
    """
    out: Dict[str, List[List[dict]]] = {label: [] for label in checkpoints}
    for cov in coverages:
        split = render_split(spec, indices, cov)
        for label, cks in checkpoints.items():
            row = []
            for ck in cks:
                net = NetConfig.from_dict(ck.config["net"])
                row.append(evaluate_split(ck.params, net, split)[0])
            out[label].append(row)
    return out


def format_cloud_table(result: Dict[str, List[List[dict]]], coverages: Sequence[float]) -> str:
    head = f"{'model':<10}" + "".join(f"{f'p={c:g}':>9}" for c in coverages)
    lines = [head, "-" * len(head)]
    for label, per_cov in result.items():
        vals = [100 * statistics.median(s["miou"] for s in row) for row in per_cov]
        lines.append(f"{label:<10}" + "".join(f"{v:9.2f}" for v in vals))
    lines.append("median mIoU (points) over checkpoints")
    return "\n".join(lines) + "\n"


def cloud_benchmark_from_manifest(checkpoints, data_dir, coverages):
    manifest = load_manifest(data_dir)
    return cloud_robustness(checkpoints, SceneSpec.from_dict(manifest["spec"]), val_indices(manifest), coverages)


def project_makespan(durations: Sequence[float], workers: int = 4) -> float:
    """Longest-processing-time schedule of independent runs over ``workers``."""
    loads = [0.0] * workers
    for d in sorted(durations, reverse=True):
        heapq.heapreplace(loads, loads[0] + d)
    return max(loads)
