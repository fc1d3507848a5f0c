"""Time-varying training quantities: loss-weight ramps/decays, the joint
cut-off index, and learning-rate schedules.

All functions are pure in (epoch, iter, config); the trainer owns the
resulting ScheduleState and advances it at epoch/iteration boundaries.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .config import ScheduleConfig


@dataclass
class ScheduleState:
    epoch: int
    iter: int
    lambda_sd: float
    lambda_mt: float
    lambda_T: float
    lambda_R: float
    lambda_adv: float
    alpha_N: int
    lr: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleState":
        return cls(**d)


def ramp_weight(epoch: float, ramp_epochs: int = 10, max_value: float = 90.0) -> float:
    """Sigmoid-shaped ramp max_value * exp(-5 (1 - x)^2), x = epoch/ramp_epochs.

    Exactly max_value from ramp_epochs on (x clamps at 1, exp(0) == 1).
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    x = min(epoch / ramp_epochs, 1.0) if ramp_epochs > 0 else 1.0
    return max_value * math.exp(-5.0 * (1.0 - x) ** 2)


def decay_weight(epoch: float, start: float = 15.0, end: float = 8.0,
                 decay_epochs: int = 15) -> float:
    """Linear decay from start at epoch 0 to end at decay_epochs, then flat."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if end > start:
        raise ValueError(f"end {end} must not exceed start {start}")
    if decay_epochs <= 0 or epoch >= decay_epochs:
        return end
    return start + (end - start) * (epoch / decay_epochs)


def cutoff_index(epoch: int, joint_count: int = 18, alpha_min: int = 9) -> int:
    """Cut-off index: starts at K, decreases by one per epoch, floors at alpha_min."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return max(joint_count - epoch, alpha_min)


def poly_lr(iteration: int, total_iters: int, base: float = 0.00025,
            power: float = 0.9) -> float:
    """Polynomial decay base * (1 - iter/total)^power."""
    if not 0 <= iteration <= total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {total_iters}]")
    return base * (1.0 - iteration / total_iters) ** power


def step_lr(epoch: int, base: float = 0.00025, milestones=(60, 90),
            gamma: float = 0.1) -> float:
    """Step decay: base * gamma^(number of milestones <= epoch)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base * gamma ** sum(1 for m in milestones if m <= epoch)


def schedule_at(cfg: ScheduleConfig, epoch: int, iteration: int,
                total_iters: int, joint_count: int) -> ScheduleState:
    """Assemble the full ScheduleState for one adaptation-stage moment."""
    return ScheduleState(
        epoch=epoch,
        iter=iteration,
        lambda_sd=ramp_weight(epoch, cfg.ramp_epochs, cfg.sd_max),
        lambda_mt=ramp_weight(epoch, cfg.ramp_epochs, cfg.mt_max),
        lambda_T=decay_weight(epoch, cfg.t_start, cfg.t_end, cfg.decay_epochs),
        lambda_R=decay_weight(epoch, cfg.r_start, cfg.r_end, cfg.decay_epochs),
        lambda_adv=cfg.adv,
        alpha_N=cutoff_index(epoch, joint_count, cfg.alpha_min),
        lr=poly_lr(iteration, total_iters, cfg.lr, cfg.poly_power),
    )
