"""Perturbation sampling and application, keypoint transforms, and MixUp.

A Perturbation has a geometric part (flip, rotation, scale) and a
photometric part (additive noise, occluder).  Geometry is applied flip
first, then rotation/scale about the frame center ((size-1)/2 in each
frame).  Image and heatmap frames are pixel-center aligned
(image_px = ratio * heatmap_px + (ratio-1)/2), so rotating an image about
its center corresponds exactly to rotating heatmap coordinates about the
heatmap center.

All functions are pure given an explicit rng / the sampled Perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import cv2
import numpy as np

from .config import PerturbConfig
from .core import Keypoint


@dataclass(frozen=True)
class Perturbation:
    rotation: float = 0.0          # degrees
    flip: bool = False
    scale: float = 1.0
    occluder: tuple | None = None  # (x0, y0, x1, y1) input pixels
    noise_sigma: float = 0.0
    noise_seed: int = 0

    @property
    def is_identity(self) -> bool:
        return (
            self.rotation == 0.0
            and not self.flip
            and self.scale == 1.0
            and self.occluder is None
            and self.noise_sigma == 0.0
        )

    def geometric_only(self) -> "Perturbation":
        return replace(self, occluder=None, noise_sigma=0.0)


IDENTITY = Perturbation()


def sample_perturbation(rng: np.random.Generator, cfg: PerturbConfig,
                        image_size: int = 256) -> Perturbation:
    """Draw one perturbation uniformly from the configured ranges.

    The draw sequence is fixed so equal rng states give equal results.
    """
    rotation = float(rng.uniform(-cfg.rotation_max, cfg.rotation_max))
    flip = bool(rng.random() < cfg.flip_prob)
    scale = float(rng.uniform(*cfg.scale_range))
    noise_sigma = float(rng.uniform(0.0, cfg.noise_sigma_max))
    occluder = None
    occ_draw = rng.random()
    lo, hi = cfg.occlude_frac_range
    ow = int(rng.uniform(lo, hi) * image_size)
    oh = int(rng.uniform(lo, hi) * image_size)
    x0 = int(rng.uniform(0, max(image_size - ow, 1)))
    y0 = int(rng.uniform(0, max(image_size - oh, 1)))
    if occ_draw < cfg.occlude_prob and ow > 0 and oh > 0:
        occluder = (x0, y0, x0 + ow, y0 + oh)
    noise_seed = int(rng.integers(0, 2**31 - 1))
    return Perturbation(rotation, flip, scale, occluder, noise_sigma, noise_seed)


def _rotation_matrix(p: Perturbation, w: int, h: int, with_scale: bool):
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    scale = p.scale if with_scale else 1.0
    return cv2.getRotationMatrix2D(center, p.rotation, scale)


def apply_to_image(p: Perturbation, img: np.ndarray,
                   fill: float = 0.0) -> np.ndarray:
    """Apply geometric then photometric parts to an (H, W, 3) image in [0,1].

    Rotation/scale use bilinear resampling with zero padding; the occluder
    rectangle is filled with `fill`; output is clamped to [0, 1].  The
    identity perturbation returns the input unchanged.
    """
    if p.is_identity:
        return img
    out = img
    if p.flip:
        out = out[:, ::-1, :]
    if p.rotation != 0.0 or p.scale != 1.0:
        h, w = out.shape[:2]
        m = _rotation_matrix(p, w, h, with_scale=True)
        out = cv2.warpAffine(
            np.ascontiguousarray(out), m, (w, h),
            flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0.0,
        )
    else:
        out = out.copy()
    if p.noise_sigma > 0.0:
        noise_rng = np.random.default_rng(p.noise_seed)
        out = out + noise_rng.normal(0.0, p.noise_sigma, out.shape).astype(np.float32)
    if p.occluder is not None:
        x0, y0, x1, y1 = p.occluder
        out[y0:y1, x0:x1, :] = fill
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _flip_permutation(k: int, flip_pairs) -> np.ndarray:
    perm = np.arange(k)
    for a, b in flip_pairs:
        if not (0 <= a < k and 0 <= b < k) or a == b:
            raise ValueError(f"bad flip pair ({a}, {b}) for {k} joints")
        perm[a], perm[b] = b, a
    if not np.array_equal(perm[perm], np.arange(k)):
        raise ValueError("flip_pairs is not an involutive pairing")
    return perm


def apply_geometric_to_heatmaps(p: Perturbation, heatmaps: np.ndarray,
                                flip_pairs) -> np.ndarray:
    """Apply only the output-affecting parts (flip, rotation) to a (K, h, w)
    stack; flipping swaps paired left/right channels.  Scale and the
    photometric parts are ignored."""
    k, h, w = heatmaps.shape
    perm = _flip_permutation(k, flip_pairs)
    out = heatmaps
    if p.flip:
        out = out[perm][:, :, ::-1]
    if p.rotation != 0.0:
        m = _rotation_matrix(p, w, h, with_scale=False)
        hw_k = np.ascontiguousarray(out.transpose(1, 2, 0))
        warped = cv2.warpAffine(
            hw_k, m, (w, h),
            flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0.0,
        )
        if warped.ndim == 2:  # cv2 drops a singleton channel axis
            warped = warped[:, :, None]
        out = warped.transpose(2, 0, 1)
    return np.ascontiguousarray(out, dtype=heatmaps.dtype)


def transform_keypoints(p: Perturbation, keypoints, w: int, h: int,
                        flip_pairs, with_scale: bool = True):
    """Track keypoints through the geometric part of a perturbation.

    Returns keypoints in the same frame; joints that land outside
    [0, w) x [0, h) are marked invisible (coordinates kept unclamped).
    """
    k = len(keypoints)
    perm = _flip_permutation(k, flip_pairs)
    kps = list(keypoints)
    if p.flip:
        kps = [kps[perm[c]] for c in range(k)]
        kps = [Keypoint(w - 1 - kp.x, kp.y, kp.visible) for kp in kps]
    if p.rotation != 0.0 or (with_scale and p.scale != 1.0):
        m = _rotation_matrix(p, w, h, with_scale=with_scale)
        out = []
        for kp in kps:
            x = m[0, 0] * kp.x + m[0, 1] * kp.y + m[0, 2]
            y = m[1, 0] * kp.x + m[1, 1] * kp.y + m[1, 2]
            out.append(Keypoint(float(x), float(y), kp.visible))
        kps = out
    return [
        Keypoint(kp.x, kp.y, bool(kp.visible and 0 <= kp.x < w and 0 <= kp.y < h))
        for kp in kps
    ]


@dataclass
class MixedPair:
    src_image: np.ndarray
    src_heatmaps: np.ndarray
    tgt_image: np.ndarray
    tgt_heatmaps: np.ndarray
    lam_src: float                 # source weight of the mixed-source sample


def mixup(src_image, src_heatmaps, tgt_image, tgt_heatmaps,
          rng: np.random.Generator, mix_alpha: float) -> MixedPair:
    """Build virtual source/target examples from one source/target pair.

    lam ~ Beta(alpha, alpha); the mixed-source sample weights the source by
    lam' = max(lam, 1-lam) >= 0.5 (domain tag stays source); the
    mixed-target sample symmetrically uses min(lam, 1-lam) source weight.
    """
    if mix_alpha <= 0:
        raise ValueError(f"mix_alpha must be positive, got {mix_alpha}")
    lam = float(rng.beta(mix_alpha, mix_alpha))
    lam_src = max(lam, 1.0 - lam)
    lam_tgt = 1.0 - lam_src
    return MixedPair(
        src_image=lam_src * src_image + (1.0 - lam_src) * tgt_image,
        src_heatmaps=lam_src * src_heatmaps + (1.0 - lam_src) * tgt_heatmaps,
        tgt_image=lam_tgt * src_image + (1.0 - lam_tgt) * tgt_image,
        tgt_heatmaps=lam_tgt * src_heatmaps + (1.0 - lam_tgt) * tgt_heatmaps,
        lam_src=lam_src,
    )
