"""Procedural toy datasets, annotated-dataset ingestion, pseudo-label store.

Dataset layout (one directory per domain/split):

    root/images/*.png
    root/annotations.json     # JSON list, one record per line:
        { "id": str, "image": rel-path, "bbox": [x0, y0, x1, y1],
          "keypoints": [[x, y, v], ...K] }   # original-image pixels, v in {0,1}

Pseudo-label store: JSON lines, one record per sample
    { "id": str, "kpts": [[x, y, conf], ...K], "version": 1 }
with coordinates in output-heatmap space.

The toy generator renders an articulated stick-creature whose kinematics
depend only on the sample seed; the source style uses flat colors on a
plain background while the target style adds background texture, color
jitter, occluders and pixel noise, so the two domains share geometry and
differ only in appearance.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import cv2
import numpy as np

from .config import TOY_GROUP_MAP, parse_group_map
from .core import DataError, Keypoint, PoseSample

HEATMAP_STRIDE = 4               # input px per heatmap px
COORD_OFFSET = (HEATMAP_STRIDE - 1) / 2.0   # pixel-center alignment

TOY_JOINT_COUNT = 10
TOY_JOINT_NAMES = (
    "eye", "chin", "left_shoulder", "right_shoulder", "hip",
    "left_elbow", "right_elbow", "left_hoof", "right_hoof", "tail",
)
STORE_VERSION = 1


@dataclass
class DatasetSpec:
    root: str
    split: str                   # train | test
    domain: str                  # source | target
    joint_count: int = TOY_JOINT_COUNT
    group_map: dict | None = None

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise DataError(f"bad split {self.split!r}")
        if self.domain not in ("source", "target"):
            raise DataError(f"bad domain {self.domain!r}")
        if self.group_map is None:
            self.group_map = parse_group_map(TOY_GROUP_MAP, self.joint_count)


def image_to_heatmap_coords(x_px: float) -> float:
    return (x_px - COORD_OFFSET) / HEATMAP_STRIDE


def heatmap_to_image_coords(x_hm: float) -> float:
    return x_hm * HEATMAP_STRIDE + COORD_OFFSET


# --------------------------------------------------------------------------
# toy creature generation

_SOURCE_BG = np.array([211, 214, 218], dtype=np.float64)
_PALETTE = {
    "body": (92, 58, 30),
    "near_leg": (118, 78, 42),
    "far_leg": (54, 33, 17),
    "head": (112, 74, 44),
    "eye": (242, 242, 242),
    "chin": (24, 20, 16),
}


def _sample_pose(rng: np.random.Generator, s: float) -> dict:
    """Creature kinematics in image pixels; y grows downward."""
    d = 1 if rng.random() < 0.5 else -1
    cx = rng.uniform(0.42, 0.58) * s
    cy = rng.uniform(0.42, 0.56) * s
    half_len = rng.uniform(0.16, 0.22) * s
    phi = math.radians(rng.uniform(-15, 15))
    ax, ay = math.cos(phi), math.sin(phi)
    front = np.array([cx + d * half_len * ax, cy + d * half_len * ay])
    rear = np.array([cx - d * half_len * ax, cy - d * half_len * ay])
    body_w = rng.uniform(0.045, 0.065) * s

    head = front + np.array([d * 0.10 * s, -0.07 * s])
    head_r = rng.uniform(0.050, 0.062) * s
    eye = head + np.array([d * 0.018 * s, -0.012 * s])
    chin = head + np.array([d * 0.032 * s, 0.052 * s])

    def leg(origin):
        length = rng.uniform(0.20, 0.28) * s
        t1 = math.radians(rng.uniform(-25, 25))
        t2 = t1 + math.radians(rng.uniform(-20, 20))
        mid = origin + 0.5 * length * np.array([math.sin(t1), math.cos(t1)])
        end = mid + 0.5 * length * np.array([math.sin(t2), math.cos(t2)])
        return mid, end

    near_sh = front + np.array([d * 0.012 * s, 0.0])
    far_sh = front - np.array([d * 0.012 * s, 0.0])
    near_elbow, near_hoof = leg(near_sh)
    far_elbow, far_hoof = leg(far_sh)
    hind_near = leg(rear + np.array([d * 0.01 * s, 0.0]))
    hind_far = leg(rear - np.array([d * 0.01 * s, 0.0]))

    tau = math.radians(rng.uniform(20, 60))
    tail = rear + 0.10 * s * np.array([-d * math.cos(tau), -math.sin(tau)])

    # near side is the creature's right when it faces right (d = +1)
    if d == 1:
        r_sh, r_elbow, r_hoof = near_sh, near_elbow, near_hoof
        l_sh, l_elbow, l_hoof = far_sh, far_elbow, far_hoof
    else:
        l_sh, l_elbow, l_hoof = near_sh, near_elbow, near_hoof
        r_sh, r_elbow, r_hoof = far_sh, far_elbow, far_hoof

    joints = np.stack([eye, chin, l_sh, r_sh, rear, l_elbow, r_elbow,
                       l_hoof, r_hoof, tail])
    extremities = np.vstack([
        joints, front[None], hind_near[1][None], hind_far[1][None],
        head[None] + head_r, head[None] - head_r,
    ])

    # deterministic shift so everything stays inside a small margin
    margin = 0.04 * s
    shift = np.zeros(2)
    lo, hi = extremities.min(axis=0), extremities.max(axis=0)
    for a in range(2):
        if lo[a] < margin:
            shift[a] = margin - lo[a]
        elif hi[a] > s - margin:
            shift[a] = (s - margin) - hi[a]

    def sh(pt):
        return pt + shift

    return {
        "dir": d,
        "front": sh(front), "rear": sh(rear), "body_w": body_w,
        "head": sh(head), "head_r": head_r,
        "joints": joints + shift,
        "near": (sh(near_sh), sh(near_elbow), sh(near_hoof)),
        "far": (sh(far_sh), sh(far_elbow), sh(far_hoof)),
        "hind_near": (sh(rear + np.array([d * 0.01 * s, 0.0])),
                      sh(hind_near[0]), sh(hind_near[1])),
        "hind_far": (sh(rear - np.array([d * 0.01 * s, 0.0])),
                     sh(hind_far[0]), sh(hind_far[1])),
        "extremities": extremities + shift,
    }


def _snap_to_grid(pt_px: np.ndarray, h_o: int) -> np.ndarray:
    """Snap an image-pixel point onto the heatmap grid (returns image px)."""
    hm = np.round(image_to_heatmap_coords(pt_px))
    hm = np.clip(hm, 0, h_o - 1)
    return heatmap_to_image_coords(hm)


def _pt(p) -> tuple:
    return int(round(p[0])), int(round(p[1]))


def _draw_creature(canvas: np.ndarray, pose: dict, colors: dict, s: float,
                   snapped: dict):
    thick_leg = max(1, int(round(0.020 * s)))
    thick_body = max(2, int(round(2 * pose["body_w"])))
    thick_tail = max(1, int(round(0.012 * s)))

    def line(a, b, color, t):
        cv2.line(canvas, _pt(a), _pt(b), tuple(float(c) for c in color), t,
                 lineType=cv2.LINE_AA)

    # far limbs first so the body overlaps them
    fs, fe, fh = snapped["far"]
    line(fs, fe, colors["far_leg"], thick_leg)
    line(fe, fh, colors["far_leg"], thick_leg)
    hs, he, hh = pose["hind_far"]
    line(hs, he, colors["far_leg"], thick_leg)
    line(he, hh, colors["far_leg"], thick_leg)

    line(snapped["rear"], snapped["front"], colors["body"], thick_body)
    line(snapped["rear"], snapped["tail"], colors["body"], thick_tail)

    ns, ne, nh = snapped["near"]
    line(ns, ne, colors["near_leg"], thick_leg)
    line(ne, nh, colors["near_leg"], thick_leg)
    hs, he, hh = pose["hind_near"]
    line(hs, he, colors["near_leg"], thick_leg)
    line(he, hh, colors["near_leg"], thick_leg)

    cv2.circle(canvas, _pt(pose["head"]), int(round(pose["head_r"])),
               tuple(float(c) for c in colors["head"]), -1, lineType=cv2.LINE_AA)
    line(pose["head"], snapped["chin"], colors["head"], thick_leg + 1)
    cv2.circle(canvas, _pt(snapped["eye"]), max(1, int(round(0.014 * s))),
               tuple(float(c) for c in colors["eye"]), -1, lineType=cv2.LINE_AA)
    cv2.circle(canvas, _pt(snapped["chin"]), max(1, int(round(0.008 * s))),
               tuple(float(c) for c in colors["chin"]), -1, lineType=cv2.LINE_AA)


def _target_background(rng: np.random.Generator, s: int) -> np.ndarray:
    base = rng.uniform(80, 200, size=3)
    canvas = np.ones((s, s, 3), dtype=np.float64) * base
    yy, xx = np.mgrid[0:s, 0:s]
    for _ in range(2):
        f = rng.uniform(2, 8)
        ang = rng.uniform(0, math.pi)
        ux, uy = math.cos(ang), math.sin(ang)
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(10, 35)
        pattern = amp * np.sin(2 * math.pi * f * (ux * xx + uy * yy) / s + phase)
        weights = rng.uniform(0.5, 1.0, size=3)
        canvas += pattern[:, :, None] * weights
    blob = rng.normal(0, 18, size=(8, 8, 3))
    canvas += cv2.resize(blob, (s, s), interpolation=cv2.INTER_LINEAR)
    return canvas


def _occlude(canvas: np.ndarray, rng: np.random.Generator, s: int):
    n = rng.choice([0, 1, 2], p=[0.35, 0.40, 0.25])
    for _ in range(n):
        w = int(rng.uniform(0.12, 0.28) * s)
        h = int(rng.uniform(0.12, 0.28) * s)
        x0 = int(rng.uniform(0, s - w))
        y0 = int(rng.uniform(0, s - h))
        color = rng.uniform(30, 230, size=3)
        canvas[y0:y0 + h, x0:x0 + w] = color
        if rng.random() < 0.5:
            stripe = rng.uniform(30, 230, size=3)
            step = max(3, int(0.02 * s))
            for x in range(x0, x0 + w, 2 * step):
                canvas[y0:y0 + h, x:min(x + step, x0 + w)] = stripe


def generate_toy_sample(seed: int, style: str, size: int = 128,
                        sample_id: str | None = None) -> PoseSample:
    """Render one creature; pose depends only on seed, appearance on style."""
    if style not in ("source", "target"):
        raise DataError(f"bad style {style!r}")
    s = size
    h_o = s // HEATMAP_STRIDE
    rng_pose = np.random.default_rng([int(seed), 11])
    rng_app = np.random.default_rng([int(seed), 23, 0 if style == "source" else 1])

    pose = _sample_pose(rng_pose, float(s))

    snapped_joints = np.stack([_snap_to_grid(j, h_o) for j in pose["joints"]])
    snapped = {
        "eye": snapped_joints[0], "chin": snapped_joints[1],
        "near": None, "far": None,
        "rear": snapped_joints[4], "tail": snapped_joints[9],
        "front": _snap_to_grid(pose["front"], h_o),
    }
    if pose["dir"] == 1:   # near side = right joints (3, 6, 8)
        snapped["near"] = (snapped_joints[3], snapped_joints[6], snapped_joints[8])
        snapped["far"] = (snapped_joints[2], snapped_joints[5], snapped_joints[7])
    else:
        snapped["near"] = (snapped_joints[2], snapped_joints[5], snapped_joints[7])
        snapped["far"] = (snapped_joints[3], snapped_joints[6], snapped_joints[8])

    if style == "source":
        canvas = np.ones((s, s, 3), dtype=np.float64) * _SOURCE_BG
        colors = {k: np.array(v, dtype=np.float64) for k, v in _PALETTE.items()}
    else:
        canvas = _target_background(rng_app, s)
        gain = rng_app.uniform(0.55, 1.45, size=3)
        bias = rng_app.uniform(-25, 25, size=3)
        colors = {k: np.clip(np.array(v) * gain + bias, 0, 255)
                  for k, v in _PALETTE.items()}

    _draw_creature(canvas, pose, colors, float(s), snapped)

    if style == "target":
        _occlude(canvas, rng_app, s)
        canvas += rng_app.normal(0, rng_app.uniform(2, 8), size=canvas.shape)

    image = (np.clip(canvas, 0, 255) / 255.0).astype(np.float32)

    ext = pose["extremities"]
    m = 0.05 * s
    bbox = (
        float(np.clip(ext[:, 0].min() - m, 0, s)),
        float(np.clip(ext[:, 1].min() - m, 0, s)),
        float(np.clip(ext[:, 0].max() + m, 0, s)),
        float(np.clip(ext[:, 1].max() + m, 0, s)),
    )

    keypoints = [
        Keypoint(
            x=float(image_to_heatmap_coords(j[0])),
            y=float(image_to_heatmap_coords(j[1])),
            visible=True,
        )
        for j in snapped_joints
    ]
    return PoseSample(
        image=image,
        keypoints=keypoints,
        domain=style,
        bbox=bbox,
        id=sample_id if sample_id is not None else f"{style}_{int(seed)}",
    )


# --------------------------------------------------------------------------
# dataset materialization and loading


def _annotation_record(sample: PoseSample, image_rel: str) -> dict:
    kpts = [
        [heatmap_to_image_coords(kp.x), heatmap_to_image_coords(kp.y),
         1 if kp.visible else 0]
        for kp in sample._keypoints
    ]
    return {
        "id": sample.id,
        "image": image_rel,
        "bbox": list(sample.bbox),
        "keypoints": kpts,
    }


def write_annotations(records: list, path: str):
    """One record per line so parse errors can name a file line."""
    lines = ",\n".join("  " + json.dumps(r, sort_keys=True) for r in records)
    with open(path, "w") as fh:
        fh.write("[\n" + lines + "\n]\n" if records else "[]\n")


def write_split(out_dir: str, samples: list):
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    records = []
    for sample in samples:
        rel = os.path.join("images", f"{sample.id}.png")
        bgr = cv2.cvtColor((sample.image * 255).astype(np.uint8), cv2.COLOR_RGB2BGR)
        if not cv2.imwrite(os.path.join(out_dir, rel), bgr):
            raise DataError(f"failed to write image for sample {sample.id!r}")
        records.append(_annotation_record(sample, rel))
    write_annotations(records, os.path.join(out_dir, "annotations.json"))


def materialize_toy_dataset(out_root: str, n_source: int, n_target: int,
                            seed: int, size: int = 128, n_test: int = 200):
    """Write source/target x train/test splits under out_root."""
    plan = [
        ("source", "train", n_source, 0),
        ("source", "test", n_test, 1),
        ("target", "train", n_target, 2),
        ("target", "test", n_test, 3),
    ]
    for domain, split, n, code in plan:
        seeds = np.random.SeedSequence([int(seed), code]).generate_state(n)
        samples = [
            generate_toy_sample(
                int(seeds[i]), domain, size,
                sample_id=f"{domain}_{split}_{i:05d}",
            )
            for i in range(n)
        ]
        write_split(os.path.join(out_root, domain, split), samples)
    return out_root


def split_dir(root: str, domain: str, split: str) -> str:
    return os.path.join(root, domain, split)


def _parse_keypoint_row(row, lineno: int, path: str):
    if (not isinstance(row, (list, tuple)) or len(row) != 3
            or not all(isinstance(v, (int, float)) for v in row)
            or row[2] not in (0, 1)):
        raise DataError(f"{path} line {lineno}: malformed keypoint row {row!r}")
    return float(row[0]), float(row[1]), int(row[2])


def load_dataset(spec: DatasetSpec, seed: int | None = None) -> list:
    """Load every sample of a split; deterministic shuffle when seed given.

    Annotation coordinates are converted to output-heatmap space; joints
    outside the bounding box or the heatmap grid are clamped onto the grid
    and flagged invisible.
    """
    ann_path = os.path.join(spec.root, "annotations.json")
    if not os.path.exists(ann_path):
        raise DataError(f"annotation file not found: {ann_path}")
    with open(ann_path) as fh:
        try:
            records = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"{ann_path}: invalid JSON ({e})") from None
    if not isinstance(records, list):
        raise DataError(f"{ann_path}: expected a JSON list of records")

    samples = []
    for i, rec in enumerate(records):
        lineno = i + 2   # records are written one per line after "["
        for field in ("id", "image", "bbox", "keypoints"):
            if field not in rec:
                raise DataError(f"{ann_path} line {lineno}: missing {field!r}")
        img_path = os.path.join(spec.root, rec["image"])
        if not os.path.exists(img_path):
            raise DataError(
                f"missing image file for sample {rec['id']!r}: {img_path}"
            )
        bgr = cv2.imread(img_path, cv2.IMREAD_COLOR)
        if bgr is None:
            raise DataError(f"unreadable image for sample {rec['id']!r}: {img_path}")
        if bgr.shape[0] != bgr.shape[1] or bgr.shape[0] % HEATMAP_STRIDE:
            raise DataError(
                f"sample {rec['id']!r}: image must be square with size "
                f"divisible by {HEATMAP_STRIDE}, got {bgr.shape[:2]}"
            )
        image = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0
        h_o = image.shape[0] // HEATMAP_STRIDE

        if len(rec["keypoints"]) != spec.joint_count:
            raise DataError(
                f"{ann_path} line {lineno}: expected {spec.joint_count} "
                f"keypoints, got {len(rec['keypoints'])}"
            )
        bbox = tuple(float(v) for v in rec["bbox"])
        keypoints = []
        for row in rec["keypoints"]:
            x_px, y_px, v = _parse_keypoint_row(row, lineno, ann_path)
            x = image_to_heatmap_coords(x_px)
            y = image_to_heatmap_coords(y_px)
            in_grid = 0 <= x < h_o and 0 <= y < h_o
            in_bbox = bbox[0] <= x_px <= bbox[2] and bbox[1] <= y_px <= bbox[3]
            visible = bool(v == 1 and in_grid and in_bbox)
            x = float(np.clip(x, 0, h_o - 1))
            y = float(np.clip(y, 0, h_o - 1))
            keypoints.append(Keypoint(x, y, visible))
        samples.append(PoseSample(
            image=image, keypoints=keypoints, domain=spec.domain,
            bbox=bbox, id=rec["id"],
        ))

    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(samples))
        samples = [samples[i] for i in order]
    return samples


# --------------------------------------------------------------------------
# pseudo-label store


@dataclass
class PseudoLabel:
    """Decoded keypoints + per-joint confidence for one target sample.

    Coordinates are in output-heatmap space.  Which joints count as
    pseudo-visible is a function of the consumer's confidence threshold.
    """

    sample_id: str
    keypoints: np.ndarray        # (K, 2) float64, columns x, y
    confidence: np.ndarray       # (K,) float64 in [0, 1]

    def visible_mask(self, threshold: float) -> np.ndarray:
        return self.confidence >= threshold

    def validate(self):
        kp = np.asarray(self.keypoints, dtype=np.float64)
        cf = np.asarray(self.confidence, dtype=np.float64)
        if kp.ndim != 2 or kp.shape[1] != 2 or cf.shape != (kp.shape[0],):
            raise DataError(
                f"pseudo label {self.sample_id!r}: bad shapes {kp.shape}, {cf.shape}"
            )
        if not np.isfinite(kp).all() or not np.isfinite(cf).all():
            raise DataError(f"pseudo label {self.sample_id!r}: non-finite values")
        if (cf < 0).any() or (cf > 1).any():
            raise DataError(
                f"pseudo label {self.sample_id!r}: confidence outside [0, 1]"
            )


def pseudo_store_write(labels: list, path: str):
    seen = set()
    lines = []
    for label in labels:
        if label.sample_id in seen:
            raise DataError(f"duplicate pseudo-label id {label.sample_id!r}")
        seen.add(label.sample_id)
        label.validate()
        kpts = [
            [float(x), float(y), float(c)]
            for (x, y), c in zip(np.asarray(label.keypoints), label.confidence)
        ]
        lines.append(json.dumps(
            {"id": label.sample_id, "kpts": kpts, "version": STORE_VERSION},
            sort_keys=True,
        ))
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    os.replace(tmp, path)


def pseudo_store_read(path: str) -> list:
    if not os.path.exists(path):
        raise DataError(f"pseudo-label store not found: {path}")
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path} line {lineno}: invalid JSON ({e})") from None
            if rec.get("version") != STORE_VERSION:
                raise DataError(
                    f"{path} line {lineno}: version tag "
                    f"{rec.get('version')!r} != {STORE_VERSION}"
                )
            kpts = np.asarray(rec["kpts"], dtype=np.float64)
            label = PseudoLabel(
                sample_id=rec["id"],
                keypoints=kpts[:, :2].copy(),
                confidence=kpts[:, 2].copy(),
            )
            label.validate()
            labels.append(label)
    return labels
