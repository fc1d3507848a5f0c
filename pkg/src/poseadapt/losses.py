"""Loss terms: heatmap MSE, per-joint losses with dynamic-threshold
small-loss selection, domain-classifier losses, and the weighted total.

All functions take torch tensors and preserve gradients.  Selection is per
sample: each sample's K joint losses are thresholded independently, and
non-selected joints contribute no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .schedules import ScheduleState

PROB_EPS = 1e-7   # probability clamp before logs in the domain loss


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def mse_heatmap_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element, (1/N) sum (pred - target)^2."""
    _check_shapes(pred, target)
    return ((pred - target) ** 2).mean()


def per_joint_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-joint MSE: reduces the two trailing spatial dims only.

    (K, h, w) -> (K,);  (B, K, h, w) -> (B, K).
    """
    _check_shapes(pred, target)
    return ((pred - target) ** 2).mean(dim=(-2, -1))


def dynamic_threshold(joint_losses: torch.Tensor, alpha_n: int) -> torch.Tensor:
    """The alpha_n-th smallest joint loss (1-based), per the cut-off index."""
    k = joint_losses.shape[-1]
    if not 1 <= alpha_n <= k:
        raise ValueError(f"alpha_n {alpha_n} outside [1, {k}]")
    return torch.sort(joint_losses, dim=-1).values[..., alpha_n - 1]


def selected_pseudo_loss(joint_losses: torch.Tensor, alpha_n: int):
    """Mean of the alpha_n smallest joint losses and their index set.

    Joints with loss <= threshold are kept; ties at the threshold are
    admitted in ascending sort order until exactly alpha_n survive.
    """
    if joint_losses.dim() != 1:
        raise ValueError("selected_pseudo_loss expects a (K,) loss vector")
    k = joint_losses.shape[0]
    if not 1 <= alpha_n <= k:
        raise ValueError(f"alpha_n {alpha_n} outside [1, {k}]")
    order = torch.argsort(joint_losses, stable=True)
    selected = order[:alpha_n]
    return joint_losses[selected].mean(), selected


def selected_pseudo_loss_masked(joint_losses: torch.Tensor,
                                visible: torch.Tensor, alpha_n: int):
    """Batched selection restricted to pseudo-visible joints.

    joint_losses: (B, K); visible: (B, K) bool.  Each sample keeps its
    min(alpha_n, #visible) smallest-loss visible joints; samples with no
    visible joint contribute nothing.  Returns the mean over contributing
    samples (0 if none) and the per-sample selected index lists.
    """
    b, k = joint_losses.shape
    per_sample = []
    selected_sets = []
    for i in range(b):
        vis_idx = torch.nonzero(visible[i], as_tuple=False).flatten()
        if vis_idx.numel() == 0:
            selected_sets.append([])
            continue
        n_keep = min(alpha_n, int(vis_idx.numel()))
        losses_i = joint_losses[i, vis_idx]
        order = torch.argsort(losses_i, stable=True)
        chosen = vis_idx[order[:n_keep]]
        per_sample.append(joint_losses[i, chosen].mean())
        selected_sets.append(sorted(int(c) for c in chosen))
    if not per_sample:
        total = joint_losses.new_zeros(())
    else:
        total = torch.stack(per_sample).mean()
    return total, selected_sets


def domain_losses(logit_source: torch.Tensor, logit_target: torch.Tensor):
    """Domain-classifier loss l_d and its adversarial negation.

    With p = sigmoid(logit): l_d = -log(1 - p_target) - log(p_source),
    averaged over the batch; l_adv = -l_d.  In training the adversarial
    side is realized through the gradient-reversal layer, not by
    backpropagating l_adv separately.
    """
    p_s = torch.sigmoid(logit_source).clamp(PROB_EPS, 1 - PROB_EPS)
    p_t = torch.sigmoid(logit_target).clamp(PROB_EPS, 1 - PROB_EPS)
    l_d = -torch.log(1 - p_t).mean() - torch.log(p_s).mean()
    return l_d, -l_d


@dataclass
class LossBreakdown:
    l_source: float = 0.0
    l_adv: float = 0.0
    l_d: float = 0.0
    l_sd: float = 0.0
    l_pseudo_mdam: float = 0.0
    l_mt: float = 0.0
    l_pseudo_refine: float = 0.0
    total: float = 0.0
    selected_joints_mdam: list = field(default_factory=list)
    selected_joints_refine: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "l_source": self.l_source,
            "l_adv": self.l_adv,
            "l_d": self.l_d,
            "l_sd": self.l_sd,
            "l_pseudo_mdam": self.l_pseudo_mdam,
            "l_mt": self.l_mt,
            "l_pseudo_refine": self.l_pseudo_refine,
            "total": self.total,
            "selected_joints_mdam": self.selected_joints_mdam,
            "selected_joints_refine": self.selected_joints_refine,
        }


def total_loss(l_source, l_d, l_sd, l_pseudo_mdam, l_mt, l_pseudo_refine,
               schedule: ScheduleState,
               selected_mdam=None, selected_refine=None) -> LossBreakdown:
    """Weighted total: L_S + lambda_adv*L_adv + inner + outer, with
    inner = lambda_sd*L_sd + lambda_T*L_T and
    outer = lambda_mt*L_mt + lambda_R*L_R, and L_adv = -L_d."""
    def val(x):
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    l_source, l_d = val(l_source), val(l_d)
    l_sd, l_pseudo_mdam = val(l_sd), val(l_pseudo_mdam)
    l_mt, l_pseudo_refine = val(l_mt), val(l_pseudo_refine)
    l_adv = -l_d
    total = (
        l_source
        + schedule.lambda_adv * l_adv
        + schedule.lambda_sd * l_sd
        + schedule.lambda_T * l_pseudo_mdam
        + schedule.lambda_mt * l_mt
        + schedule.lambda_R * l_pseudo_refine
    )
    return LossBreakdown(
        l_source=l_source, l_adv=l_adv, l_d=l_d, l_sd=l_sd,
        l_pseudo_mdam=l_pseudo_mdam, l_mt=l_mt,
        l_pseudo_refine=l_pseudo_refine, total=total,
        selected_joints_mdam=selected_mdam or [],
        selected_joints_refine=selected_refine or [],
    )
