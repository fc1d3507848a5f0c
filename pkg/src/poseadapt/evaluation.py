"""Checkpoint evaluation: per-joint-group PCK tables and run comparison.

Evaluation decodes the student network (never the teacher) deterministically
with no augmentation.  `visible` mode scores only joints whose annotation is
visible; `full` mode scores every annotated joint including self-occluded
ones.  Reports are emitted as JSON and as an aligned plain-text table.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import DataError, Keypoint, decode_heatmap, pck_counts, _report_from_counts
from .datasets import HEATMAP_STRIDE, DatasetSpec, load_dataset
from .model import load_checkpoint, restore_models


@dataclass
class EvalReport:
    dataset: str
    alpha: float
    mode: str
    head: str
    sample_count: int
    per_joint: list
    per_group: dict
    mean: float
    no_data: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def save(self, path: str):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "EvalReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def format_table(report: EvalReport) -> str:
    names = list(report.per_group) + ["mean"]
    values = [report.per_group[g] for g in report.per_group] + [report.mean]
    head = f"{'dataset':<24}" + "".join(f"{n:>10}" for n in names)
    row = f"{report.dataset:<24}" + "".join(
        f"{100 * v:>10.2f}" if np.isfinite(v) else f"{'-':>10}" for v in values
    )
    meta = (f"PCK@{report.alpha:g}  mode={report.mode}  head={report.head}  "
            f"samples={report.sample_count}")
    return "\n".join((meta, head, row))


def evaluate(ckpt_path: str, spec: DatasetSpec, alpha: float = 0.05,
             mode: str = "visible", batch_size: int = 32,
             head: str | None = None, remap: list | None = None) -> EvalReport:
    """Score a checkpoint on one dataset split.

    `remap` maps dataset joint index -> checkpoint joint index and is
    required whenever the two joint counts differ; index matching is never
    silent.
    """
    if mode not in ("visible", "full"):
        raise DataError(f"unknown eval mode {mode!r}")
    payload = load_checkpoint(ckpt_path)
    student, _, ckpt_cfg = restore_models(payload)
    student.eval()
    head = head or ckpt_cfg.model.eval_head
    if head not in ("refined", "mdam"):
        raise DataError(f"unknown eval head {head!r}")

    if remap is None:
        if spec.joint_count != student.joint_count:
            raise DataError(
                f"joint count mismatch: dataset has {spec.joint_count}, "
                f"checkpoint has {student.joint_count}; supply an explicit remap"
            )
        remap = list(range(spec.joint_count))
    else:
        if len(remap) != spec.joint_count:
            raise DataError(
                f"remap length {len(remap)} != dataset joint count "
                f"{spec.joint_count}"
            )
        bad = [j for j in remap if not 0 <= j < student.joint_count]
        if bad:
            raise DataError(f"remap names out-of-range checkpoint joints {bad}")

    samples = load_dataset(spec)
    k = spec.joint_count
    correct = np.zeros(k, dtype=np.int64)
    counted = np.zeros(k, dtype=np.int64)

    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x = torch.from_numpy(np.ascontiguousarray(
                np.stack([s.image for s in chunk]).transpose(0, 3, 1, 2)))
            out = student(x)
            maps = (out.refined if head == "refined" else out.heatmaps).numpy()
            for s, stack in zip(chunk, maps):
                pred_all, _ = decode_heatmap(stack)
                pred = [pred_all[remap[j]] for j in range(k)]
                gt = s.keypoints
                if mode == "full":
                    gt = [dataclasses.replace(kp, visible=True) for kp in gt]
                bbox_hm = tuple(v / HEATMAP_STRIDE for v in s.bbox)
                c, n = pck_counts(pred, gt, bbox_hm, alpha)
                correct += c
                counted += n

    base = _report_from_counts(correct, counted, alpha, spec.group_map)
    return EvalReport(
        dataset=os.path.normpath(spec.root),
        alpha=alpha,
        mode=mode,
        head=head,
        sample_count=len(samples),
        per_joint=[float(v) for v in base.per_joint],
        per_group=base.per_group,
        mean=base.mean,
        no_data=base.no_data,
    )


def compare_runs(report_a: EvalReport, report_b: EvalReport) -> dict:
    """Per-group and mean deltas (a - b); inputs must share dataset, alpha
    and mode."""
    for attr in ("dataset", "alpha", "mode"):
        if getattr(report_a, attr) != getattr(report_b, attr):
            raise DataError(
                f"reports differ in {attr}: "
                f"{getattr(report_a, attr)!r} vs {getattr(report_b, attr)!r}"
            )
    groups = {
        name: report_a.per_group[name] - report_b.per_group[name]
        for name in report_a.per_group
    }
    return {
        "dataset": report_a.dataset,
        "alpha": report_a.alpha,
        "mode": report_a.mode,
        "per_group_delta": groups,
        "mean_delta": report_a.mean - report_b.mean,
    }


def format_comparison(delta: dict) -> str:
    names = list(delta["per_group_delta"]) + ["mean"]
    values = list(delta["per_group_delta"].values()) + [delta["mean_delta"]]
    head = f"{'delta':<24}" + "".join(f"{n:>10}" for n in names)
    row = f"{delta['dataset']:<24}" + "".join(f"{100 * v:>+10.2f}" for v in values)
    return head + "\n" + row
