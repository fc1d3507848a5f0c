"""Student network (feature extractor, pose decoder, multi-scale feature
aggregation, refinement block, domain classifier with gradient reversal),
the EMA teacher, and checkpoint I/O.

The pose decoder is a 1x1 conv to the decoder width, three stride-2
deconvolution stages, and a linear 1x1 head; the three stage outputs are
upsampled to heatmap resolution and concatenated into the multi-scale
feature map feeding both the refinement block and (by default) the domain
classifier.
"""

from __future__ import annotations

import math
import os
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, TrainConfig, config_from_dict, config_hash, config_to_dict
from .core import CheckpointError

ENCODER_STRIDE = 32
HEATMAP_STRIDE = 4


class ForwardOutputs(NamedTuple):
    features: torch.Tensor     # final extractor map, (B, C, H/32, W/32)
    multiscale: torch.Tensor   # concatenated decoder stages, (B, 3*width, h, w)
    heatmaps: torch.Tensor     # pose head output, (B, K, h, w)
    refined: torch.Tensor      # refinement block output, (B, K, h, w)


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lam * grad, None


def gradient_reversal(x: torch.Tensor, lambda_adv: float) -> torch.Tensor:
    """Identity forward; backward multiplies the gradient by -lambda_adv."""
    if lambda_adv < 0:
        raise ValueError(f"lambda_adv must be >= 0, got {lambda_adv}")
    return _GradientReversal.apply(x, float(lambda_adv))


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "group":
        groups = 8 if channels % 8 == 0 else 1
        return nn.GroupNorm(groups, channels)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    raise ConfigError(f"unknown norm {kind!r}")


class _BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride, norm):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.n1 = _norm(norm, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.n2 = _norm(norm, out_ch)
        self.down = None
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                _norm(norm, out_ch),
            )

    def forward(self, x):
        identity = self.down(x) if self.down is not None else x
        out = F.relu(self.n1(self.conv1(x)), inplace=True)
        out = self.n2(self.conv2(out))
        return F.relu(out + identity, inplace=True)


class FeatureExtractor(nn.Module):
    """Stride-32 encoder; `tiny` is plain strided convs, `resnet` uses a
    7x7 stem plus residual basic-block stages."""

    def __init__(self, backbone: str, channels, norm: str):
        super().__init__()
        if len(channels) != 5:
            raise ConfigError(
                f"encoder_channels must have 5 stages for stride "
                f"{ENCODER_STRIDE}, got {channels}"
            )
        self.out_channels = channels[-1]
        if backbone == "tiny":
            layers, prev = [], 3
            for c in channels:
                layers += [nn.Conv2d(prev, c, 3, 2, 1), _norm(norm, c),
                           nn.ReLU(inplace=True)]
                prev = c
            self.net = nn.Sequential(*layers)
        elif backbone == "resnet":
            stem = [nn.Conv2d(3, channels[0], 7, 2, 3, bias=False),
                    _norm(norm, channels[0]), nn.ReLU(inplace=True)]
            blocks, prev = [], channels[0]
            for c in channels[1:]:
                blocks.append(_BasicBlock(prev, c, 2, norm))
                blocks.append(_BasicBlock(c, c, 1, norm))
                prev = c
            self.net = nn.Sequential(*(stem + blocks))
        else:
            raise ConfigError(f"unknown backbone {backbone!r}")

    def forward(self, x):
        return self.net(x)


class PoseDecoder(nn.Module):
    def __init__(self, in_ch: int, width: int, joint_count: int, norm: str):
        super().__init__()
        self.inconv = nn.Sequential(
            nn.Conv2d(in_ch, width, 1), _norm(norm, width), nn.ReLU(inplace=True)
        )
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.ConvTranspose2d(width, width, 4, 2, 1),
                _norm(norm, width), nn.ReLU(inplace=True),
            )
            for _ in range(3)
        )
        self.head = nn.Conv2d(width, joint_count, 1)

    def forward(self, x):
        x = self.inconv(x)
        stage_outputs = []
        for stage in self.stages:
            x = stage(x)
            stage_outputs.append(x)
        return self.head(x), stage_outputs


class RefinementBlock(nn.Module):
    """One bottleneck block followed by a 3x3 conv to K channels."""

    def __init__(self, in_ch: int, mid: int, joint_count: int, norm: str):
        super().__init__()
        self.reduce = nn.Sequential(
            nn.Conv2d(in_ch, mid, 1), _norm(norm, mid), nn.ReLU(inplace=True)
        )
        self.conv = nn.Sequential(
            nn.Conv2d(mid, mid, 3, 1, 1), _norm(norm, mid), nn.ReLU(inplace=True)
        )
        self.expand = nn.Sequential(nn.Conv2d(mid, in_ch, 1), _norm(norm, in_ch))
        self.head = nn.Conv2d(in_ch, joint_count, 3, 1, 1)

    def forward(self, x):
        out = self.expand(self.conv(self.reduce(x)))
        out = F.relu(out + x, inplace=True)
        return self.head(out)


_DC_BASE_CHANNELS = (64, 128, 256, 512, 1024)


def _dc_channels_for(spatial: int, configured) -> tuple:
    if spatial < 4 or spatial & (spatial - 1):
        raise ConfigError(
            f"domain classifier input spatial size {spatial} is not a power "
            "of two >= 4"
        )
    n = int(math.log2(spatial)) - 1
    if configured:
        if len(configured) != n:
            raise ConfigError(
                f"dc_channels needs {n} stride-2 layers for spatial size "
                f"{spatial}, got {len(configured)}"
            )
        return tuple(configured)
    if n > len(_DC_BASE_CHANNELS):
        raise ConfigError(f"no default domain classifier for spatial {spatial}")
    return _DC_BASE_CHANNELS[:n]


class DomainClassifier(nn.Module):
    """Fully convolutional: 4x4 stride-2 convs with leaky ReLU, then a
    2x2 stride-1 conv to one logit per batch element."""

    def __init__(self, in_ch: int, channels, leaky_slope: float, spatial: int):
        super().__init__()
        channels = _dc_channels_for(spatial, channels)
        layers, prev = [], in_ch
        for c in channels:
            layers += [nn.Conv2d(prev, c, 4, 2, 1), nn.LeakyReLU(leaky_slope)]
            prev = c
        layers.append(nn.Conv2d(prev, 1, 2, 1, 0))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        out = self.net(x)
        if out.shape[-2:] != (1, 1):
            raise ValueError(
                f"domain classifier input spatial size incompatible: got "
                f"output {tuple(out.shape)}"
            )
        return out.flatten(1).squeeze(1)


class PoseStudent(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        m, d = cfg.model, cfg.data
        if d.input_size % ENCODER_STRIDE:
            raise ConfigError(
                f"input_size {d.input_size} must be divisible by {ENCODER_STRIDE}"
            )
        self.joint_count = d.joint_count
        self.heatmap_size = d.input_size // HEATMAP_STRIDE
        self.dc_input = m.dc_input
        if m.dc_input not in ("multiscale", "features"):
            raise ConfigError(f"unknown dc_input {m.dc_input!r}")

        self.extractor = FeatureExtractor(m.backbone, m.encoder_channels, m.norm)
        self.decoder = PoseDecoder(
            self.extractor.out_channels, m.decoder_channels, d.joint_count, m.norm
        )
        self.multiscale_channels = 3 * m.decoder_channels
        self.refine = RefinementBlock(
            self.multiscale_channels, m.refine_mid_channels, d.joint_count, m.norm
        )
        dc_in = (self.multiscale_channels if m.dc_input == "multiscale"
                 else self.extractor.out_channels)
        dc_spatial = (self.heatmap_size if m.dc_input == "multiscale"
                      else d.input_size // ENCODER_STRIDE)
        self.domain_classifier = DomainClassifier(
            dc_in, m.dc_channels, m.leaky_slope, dc_spatial
        )

    def forward(self, images: torch.Tensor) -> ForwardOutputs:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        features = self.extractor(images)
        heatmaps, stages = self.decoder(features)
        size = (self.heatmap_size, self.heatmap_size)
        multiscale = torch.cat(
            [F.interpolate(s, size=size, mode="bilinear", align_corners=False)
             for s in stages],
            dim=1,
        )
        refined = self.refine(multiscale)
        return ForwardOutputs(features, multiscale, heatmaps, refined)

    def domain_classify(self, x, lambda_adv: float | None = None) -> torch.Tensor:
        """Logit per batch element; x is a ForwardOutputs or a raw feature
        map.  With lambda_adv set, the input passes through the
        gradient-reversal layer first."""
        if isinstance(x, ForwardOutputs):
            x = x.multiscale if self.dc_input == "multiscale" else x.features
        if lambda_adv is not None:
            x = gradient_reversal(x, lambda_adv)
        return self.domain_classifier(x)


def build_student(cfg: TrainConfig) -> PoseStudent:
    return PoseStudent(cfg)


def build_teacher(student: PoseStudent) -> PoseStudent:
    """A frozen copy of the student; updated only through ema_update."""
    import copy

    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return teacher


def forward_teacher(teacher: PoseStudent, images: torch.Tensor) -> torch.Tensor:
    """Refined teacher heatmaps with no gradient tracking."""
    teacher.eval()
    with torch.no_grad():
        return teacher(images).refined


@torch.no_grad()
def ema_update(teacher: PoseStudent, student: PoseStudent, alpha: float):
    """theta'_t = alpha * theta'_{t-1} + (1 - alpha) * theta_t, elementwise
    over parameters and float buffers; integer buffers are copied."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    t_state = teacher.state_dict()
    s_state = student.state_dict()
    if t_state.keys() != s_state.keys():
        raise ValueError("teacher/student parameter sets do not match")
    for key, t in t_state.items():
        s = s_state[key]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {key}: {t.shape} vs {s.shape}")
        if t.dtype.is_floating_point:
            t.mul_(alpha).add_(s, alpha=1.0 - alpha)
        else:
            t.copy_(s)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, *, student: PoseStudent, teacher: PoseStudent,
                    optimizer, schedule_state, cfg: TrainConfig, epoch: int,
                    stage: str, global_iter: int = 0):
    payload = {
        "student": student.state_dict(),
        "teacher": teacher.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "schedule": schedule_state.to_dict() if schedule_state is not None else None,
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "epoch": epoch,
        "stage": stage,
        "global_iter": global_iter,
    }
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str, expected_hash: str | None = None) -> dict:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from None
    for key in ("student", "teacher", "config", "config_hash", "epoch", "stage"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} missing field {key!r}")
    if expected_hash is not None and payload["config_hash"] != expected_hash:
        raise CheckpointError(
            f"checkpoint {path} config hash {payload['config_hash'][:12]}... "
            f"does not match expected {expected_hash[:12]}..."
        )
    return payload


def restore_models(payload: dict):
    """Rebuild student + teacher from a checkpoint payload."""
    cfg = config_from_dict(payload["config"])
    student = build_student(cfg)
    student.load_state_dict(payload["student"])
    teacher = build_student(cfg)
    teacher.load_state_dict(payload["teacher"])
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return student, teacher, cfg
