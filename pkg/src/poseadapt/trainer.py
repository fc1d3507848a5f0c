"""Two-stage training pipeline.

Stage 1 pretrains the pose network on labeled source data only.  Its
checkpoint generates pseudo labels for the unlabeled target data.  Stage 2
trains the full network on paired source/target batches with adversarial
feature alignment and the coarse-to-fine pseudo-label replacement
curriculum (self-distillation inner loop, EMA mean-teacher outer loop,
per-joint small-loss selection, optional MixUp).

All stochasticity is drawn from per-epoch numpy generators seeded by
(config seed, stage, epoch), so an interrupted run resumed from the last
epoch checkpoint reproduces the uninterrupted trajectory.  Ground-truth
keypoints of target samples are guarded: both stages run their loops under
`hide_target_labels()` and never read them.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import augment
from .config import TrainConfig, config_hash, parse_flip_pairs
from .core import (DataError, NumericalAbortError, encode_heatmap,
                   decode_heatmap, hide_target_labels)
from .datasets import (DatasetSpec, PseudoLabel, load_dataset,
                       pseudo_store_read, pseudo_store_write)
from .losses import (LossBreakdown, domain_losses, mse_heatmap_loss,
                     per_joint_mse, selected_pseudo_loss_masked, total_loss)
from .model import (build_student, build_teacher, ema_update, forward_teacher,
                    load_checkpoint, restore_models, save_checkpoint)
from .schedules import ScheduleState, schedule_at, step_lr

STAGE1_CKPT = "stage1.pt"
STAGE2_CKPT = "stage2.pt"


@dataclass
class Stage2Flags:
    adv: bool = True
    sd: bool = True
    mt: bool = True
    pseudo: bool = True
    selection: bool = True
    mixup: bool = True

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Stage2Flags":
        t = cfg.train
        return cls(adv=t.adv_enabled, sd=t.sd_enabled, mt=t.mt_enabled,
                   pseudo=t.pseudo_enabled, selection=t.selection_enabled,
                   mixup=cfg.mixup.enabled)


@dataclass
class Stage2Batch:
    """One optimization step's tensors.

    The `pl` branch feeds the pseudo-label losses and the target side of
    the domain classifier: the mixed-target forward when MixUp is on,
    otherwise the perturbed-target forward.  Consistency losses always use
    the perturbed forward against the clean-image teacher.
    """

    src_images: torch.Tensor            # (B, 3, H, W)
    src_heatmaps: torch.Tensor          # (B, K, h, w)
    tgt_images_pert: torch.Tensor
    tgt_images_pl: torch.Tensor
    pseudo_heatmaps_pl: torch.Tensor
    pseudo_visible_pl: torch.Tensor     # (B, K) bool
    tgt_images_clean: torch.Tensor
    perturbations: list
    flip_pairs: tuple


def _setup_torch(cfg: TrainConfig):
    if cfg.train.num_threads > 0:
        torch.set_num_threads(cfg.train.num_threads)
    torch.manual_seed(cfg.train.seed)


def _images_to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


def _encode_batch(keypoint_lists, h_o: int, sigma: float) -> np.ndarray:
    return np.stack([encode_heatmap(k, h_o, h_o, sigma) for k in keypoint_lists])


def _check_input_size(samples, cfg: TrainConfig):
    for s in samples[:1]:
        if s.image.shape[0] != cfg.data.input_size:
            raise DataError(
                f"dataset image size {s.image.shape[0]} != configured "
                f"input_size {cfg.data.input_size}"
            )


class _MetricsLog:
    def __init__(self, path: str, append: bool):
        self.fh = open(path, "a" if append else "w")

    def write(self, record: dict):
        self.fh.write(json.dumps(record) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _log_record(log, global_iter, epoch, breakdown: LossBreakdown,
                sched: ScheduleState):
    log.write({
        "iter": global_iter,
        "epoch": epoch,
        "losses": breakdown.to_dict(),
        "schedule": sched.to_dict(),
    })


# --------------------------------------------------------------------------
# stage 1: source-only pretraining


def pretrain(cfg: TrainConfig, out_dir: str) -> str:
    """Train extractor + pose head + refinement block on source labels only."""
    os.makedirs(out_dir, exist_ok=True)
    _setup_torch(cfg)
    spec = DatasetSpec(os.path.join(cfg.data.source_root, "train"),
                       "train", "source", cfg.data.joint_count)
    samples = load_dataset(spec)
    if not samples:
        raise DataError(f"empty source training set under {spec.root}")
    _check_input_size(samples, cfg)

    h_o = cfg.data.input_size // 4
    flip_pairs = parse_flip_pairs(cfg.data.flip_pairs, cfg.data.joint_count)
    batch = min(cfg.train.batch_size, len(samples))
    steps_per_epoch = max(1, len(samples) // batch)

    student = build_student(cfg)
    teacher = build_teacher(student)
    optimizer = torch.optim.Adam(student.parameters(), lr=cfg.schedule.lr)
    log = _MetricsLog(os.path.join(out_dir, "stage1_metrics.jsonl"), append=False)
    ckpt_path = os.path.join(out_dir, STAGE1_CKPT)

    state = ScheduleState(0, 0, 0, 0, 0, 0, 0, cfg.data.joint_count, cfg.schedule.lr)
    global_iter = 0
    student.train()
    with hide_target_labels():
        for epoch in range(cfg.train.epochs_stage1):
            lr = step_lr(epoch, cfg.schedule.lr, cfg.schedule.stage1_milestones,
                         cfg.schedule.stage1_gamma)
            for group in optimizer.param_groups:
                group["lr"] = lr
            rng = np.random.default_rng([cfg.train.seed, 3000 + epoch])
            order = rng.permutation(len(samples))
            for step in range(steps_per_epoch):
                idx = order[step * batch:(step + 1) * batch]
                images, targets = [], []
                for i in idx:
                    s = samples[i]
                    img, kps = s.image, s.keypoints
                    if cfg.train.augment_stage1:
                        p = augment.sample_perturbation(
                            rng, cfg.augment, cfg.data.input_size)
                        img = augment.apply_to_image(
                            p, img, fill=cfg.augment.occlude_fill)
                        kps = augment.transform_keypoints(
                            p, kps, h_o, h_o, flip_pairs)
                    images.append(img)
                    targets.append(kps)
                x = _images_to_tensor(np.stack(images))
                y = torch.from_numpy(
                    _encode_batch(targets, h_o, cfg.data.sigma))

                optimizer.zero_grad()
                out = student(x)
                l_mdam = mse_heatmap_loss(out.heatmaps, y)
                l_refine = mse_heatmap_loss(out.refined, y)
                loss = l_mdam + l_refine
                if not torch.isfinite(loss):
                    log.close()
                    raise NumericalAbortError(
                        f"non-finite pretraining loss at epoch {epoch} step {step}; "
                        f"last checkpoint kept at {ckpt_path}"
                    )
                loss.backward()
                optimizer.step()
                ema_update(teacher, student, cfg.train.ema_alpha)

                state = ScheduleState(epoch, global_iter, 0, 0, 0, 0, 0,
                                      cfg.data.joint_count, lr)
                if global_iter % cfg.train.log_every == 0:
                    breakdown = LossBreakdown(
                        l_source=float(l_mdam.detach()), total=float(loss.detach()))
                    _log_record(log, global_iter, epoch, breakdown, state)
                global_iter += 1
            save_checkpoint(ckpt_path, student=student, teacher=teacher,
                            optimizer=optimizer, schedule_state=state, cfg=cfg,
                            epoch=epoch, stage="stage1", global_iter=global_iter)
    if cfg.train.epochs_stage1 == 0:
        save_checkpoint(ckpt_path, student=student, teacher=teacher,
                        optimizer=optimizer, schedule_state=state, cfg=cfg,
                        epoch=-1, stage="stage1", global_iter=0)
    log.close()
    return ckpt_path


# --------------------------------------------------------------------------
# pseudo-label generation


def generate_pseudo_labels(cfg: TrainConfig, ckpt_path: str, out_path: str) -> str:
    """Decode the pretrained network over the target training split and
    persist keypoints + confidences (peak values clipped into [0, 1])."""
    payload = load_checkpoint(ckpt_path, expected_hash=config_hash(cfg))
    student, _, _ = restore_models(payload)
    student.eval()
    spec = DatasetSpec(os.path.join(cfg.data.target_root, "train"),
                       "train", "target", cfg.data.joint_count)
    samples = load_dataset(spec)
    _check_input_size(samples, cfg)

    labels = []
    batch = max(1, cfg.eval.batch_size)
    head = cfg.model.eval_head
    with hide_target_labels(), torch.no_grad():
        for start in range(0, len(samples), batch):
            chunk = samples[start:start + batch]
            x = _images_to_tensor(np.stack([s.image for s in chunk]))
            out = student(x)
            maps = out.refined if head == "refined" else out.heatmaps
            maps = maps.numpy()
            for s, stack in zip(chunk, maps):
                kps, conf = decode_heatmap(stack)
                labels.append(PseudoLabel(
                    sample_id=s.id,
                    keypoints=np.array([[kp.x, kp.y] for kp in kps]),
                    confidence=np.clip(conf, 0.0, 1.0),
                ))
    pseudo_store_write(labels, out_path)
    return out_path


# --------------------------------------------------------------------------
# stage 2: adaptation with the pseudo-label curriculum


def _pseudo_keypoints(label: PseudoLabel, threshold: float):
    from .core import Keypoint

    mask = label.visible_mask(threshold)
    return [
        Keypoint(float(x), float(y), bool(v))
        for (x, y), v in zip(np.asarray(label.keypoints), mask)
    ]


def build_stage2_batch(src_samples, tgt_samples, pseudo_map, rng, cfg,
                       flags: Stage2Flags, flip_pairs) -> Stage2Batch:
    h_o = cfg.data.input_size // 4
    thr = cfg.train.confidence_threshold

    src_images = np.stack([s.image for s in src_samples]).astype(np.float32)
    src_hms = _encode_batch([s.keypoints for s in src_samples], h_o,
                            cfg.data.sigma)

    tgt_clean = np.stack([s.image for s in tgt_samples]).astype(np.float32)
    perts, pert_images = [], []
    pert_pl_hms, pert_pl_vis = [], []
    clean_pl_hms, clean_pl_vis = [], []
    for s in tgt_samples:
        label = pseudo_map.get(s.id)
        if label is None:
            raise DataError(f"no pseudo label stored for target sample {s.id!r}")
        base_kps = _pseudo_keypoints(label, thr)
        clean_pl_hms.append(encode_heatmap(base_kps, h_o, h_o, cfg.data.sigma))
        clean_pl_vis.append([kp.visible for kp in base_kps])

        p = augment.sample_perturbation(rng, cfg.consistency, cfg.data.input_size)
        perts.append(p)
        pert_images.append(augment.apply_to_image(
            p, s.image, fill=cfg.consistency.occlude_fill))
        moved = augment.transform_keypoints(p, base_kps, h_o, h_o, flip_pairs)
        pert_pl_hms.append(encode_heatmap(moved, h_o, h_o, cfg.data.sigma))
        pert_pl_vis.append([kp.visible for kp in moved])

    pert_images = np.stack(pert_images).astype(np.float32)
    if flags.mixup:
        pl_images = np.empty_like(tgt_clean)
        pl_hms = np.empty_like(src_hms)
        for i in range(len(tgt_samples)):
            mixed = augment.mixup(src_images[i], src_hms[i], tgt_clean[i],
                                  clean_pl_hms[i], rng, cfg.mixup.alpha)
            src_images[i] = mixed.src_image
            src_hms[i] = mixed.src_heatmaps
            pl_images[i] = mixed.tgt_image
            pl_hms[i] = mixed.tgt_heatmaps
        pl_vis = np.array(clean_pl_vis, dtype=bool)
        tgt_images_pl = _images_to_tensor(pl_images)
        pseudo_hms_pl = torch.from_numpy(pl_hms.astype(np.float32))
    else:
        tgt_images_pl = None   # alias of the perturbed branch, set below
        pseudo_hms_pl = torch.from_numpy(np.stack(pert_pl_hms).astype(np.float32))
        pl_vis = np.array(pert_pl_vis, dtype=bool)

    tgt_images_pert = _images_to_tensor(pert_images)
    if tgt_images_pl is None:
        tgt_images_pl = tgt_images_pert
    return Stage2Batch(
        src_images=_images_to_tensor(src_images),
        src_heatmaps=torch.from_numpy(src_hms.astype(np.float32)),
        tgt_images_pert=tgt_images_pert,
        tgt_images_pl=tgt_images_pl,
        pseudo_heatmaps_pl=pseudo_hms_pl,
        pseudo_visible_pl=torch.from_numpy(pl_vis),
        tgt_images_clean=_images_to_tensor(tgt_clean),
        perturbations=perts,
        flip_pairs=flip_pairs,
    )


def compute_stage2_losses(student, teacher, batch: Stage2Batch,
                          sched: ScheduleState, flags: Stage2Flags):
    """One step's losses.  Returns (tensor to backpropagate, LossBreakdown).

    The backward total realizes the adversarial term through the
    gradient-reversal layer (l_d enters with weight 1; the extractor sees
    -lambda_adv times its gradient), while the reported breakdown follows
    the weighted-sum definition with l_adv = -l_d.
    """
    out_src = student(batch.src_images)
    l_source = mse_heatmap_loss(out_src.heatmaps, batch.src_heatmaps)
    backward = l_source

    joint_count = batch.src_heatmaps.shape[1]
    zero = l_source.new_zeros(())

    shared_pl = batch.tgt_images_pl is batch.tgt_images_pert
    need_pert = flags.sd or flags.mt or shared_pl
    out_pert = student(batch.tgt_images_pert) if need_pert else None
    out_pl = out_pert if shared_pl else student(batch.tgt_images_pl)

    l_sd = zero
    if flags.sd:
        l_sd = mse_heatmap_loss(out_pert.heatmaps, out_pert.refined.detach())
        backward = backward + sched.lambda_sd * l_sd

    l_mt = zero
    if flags.mt:
        t_ref = forward_teacher(teacher, batch.tgt_images_clean).numpy()
        aligned = np.stack([
            augment.apply_geometric_to_heatmaps(
                p.geometric_only(), t_ref[i], batch.flip_pairs)
            for i, p in enumerate(batch.perturbations)
        ])
        t_aligned = torch.from_numpy(aligned.astype(np.float32))
        l_mt = mse_heatmap_loss(out_pert.refined, t_aligned)
        backward = backward + sched.lambda_mt * l_mt

    l_pseudo_mdam = zero
    l_pseudo_refine = zero
    sel_mdam, sel_refine = [], []
    if flags.pseudo:
        alpha_n = sched.alpha_N if flags.selection else joint_count
        pj_mdam = per_joint_mse(out_pl.heatmaps, batch.pseudo_heatmaps_pl)
        l_pseudo_mdam, sel_mdam = selected_pseudo_loss_masked(
            pj_mdam, batch.pseudo_visible_pl, alpha_n)
        pj_refine = per_joint_mse(out_pl.refined, batch.pseudo_heatmaps_pl)
        l_pseudo_refine, sel_refine = selected_pseudo_loss_masked(
            pj_refine, batch.pseudo_visible_pl, alpha_n)
        backward = (backward + sched.lambda_T * l_pseudo_mdam
                    + sched.lambda_R * l_pseudo_refine)

    l_d = zero
    if flags.adv:
        logit_src = student.domain_classify(out_src, lambda_adv=sched.lambda_adv)
        logit_tgt = student.domain_classify(out_pl, lambda_adv=sched.lambda_adv)
        l_d, _ = domain_losses(logit_src, logit_tgt)
        backward = backward + l_d

    breakdown = total_loss(l_source, l_d, l_sd, l_pseudo_mdam, l_mt,
                           l_pseudo_refine, sched, sel_mdam, sel_refine)
    return backward, breakdown


def train(cfg: TrainConfig, pretrained_ckpt: str, pseudo_store: str,
          out_dir: str, resume_from: str | None = None,
          stop_after_epoch: int | None = None) -> str:
    """Adaptation stage.  `resume_from` continues an interrupted run from
    its last epoch checkpoint; `stop_after_epoch` ends the run early (the
    checkpoint then serves as the resume point)."""
    os.makedirs(out_dir, exist_ok=True)
    _setup_torch(cfg)
    flags = Stage2Flags.from_config(cfg)
    flip_pairs = parse_flip_pairs(cfg.data.flip_pairs, cfg.data.joint_count)

    src_spec = DatasetSpec(os.path.join(cfg.data.source_root, "train"),
                           "train", "source", cfg.data.joint_count)
    tgt_spec = DatasetSpec(os.path.join(cfg.data.target_root, "train"),
                           "train", "target", cfg.data.joint_count)
    src_samples = load_dataset(src_spec)
    tgt_samples = load_dataset(tgt_spec)
    if not src_samples or not tgt_samples:
        raise DataError("both source and target training sets must be non-empty")
    _check_input_size(src_samples, cfg)
    _check_input_size(tgt_samples, cfg)

    pseudo_map = {lbl.sample_id: lbl for lbl in pseudo_store_read(pseudo_store)}
    missing = [s.id for s in tgt_samples if s.id not in pseudo_map]
    if missing:
        raise DataError(
            f"pseudo store {pseudo_store} lacks {len(missing)} target ids "
            f"(first: {missing[0]!r})"
        )

    batch = min(cfg.train.batch_size, len(src_samples), len(tgt_samples))
    steps_per_epoch = max(1, min(len(src_samples), len(tgt_samples)) // batch)
    total_iters = max(1, cfg.train.epochs_stage2 * steps_per_epoch)
    ckpt_path = os.path.join(out_dir, STAGE2_CKPT)

    if resume_from is not None:
        payload = load_checkpoint(resume_from, expected_hash=config_hash(cfg))
        student, teacher, _ = restore_models(payload)
        optimizer = torch.optim.Adam(student.parameters(), lr=cfg.schedule.lr)
        optimizer.load_state_dict(payload["optimizer"])
        start_epoch = payload["epoch"] + 1
        global_iter = payload["global_iter"]
        state = ScheduleState.from_dict(payload["schedule"])
    else:
        payload = load_checkpoint(pretrained_ckpt, expected_hash=config_hash(cfg))
        student, _, _ = restore_models(payload)
        teacher = build_teacher(student)
        optimizer = torch.optim.Adam(student.parameters(), lr=cfg.schedule.lr)
        start_epoch = 0
        global_iter = 0
        state = schedule_at(cfg.schedule, 0, 0, total_iters, cfg.data.joint_count)
    for p in student.parameters():
        p.requires_grad_(True)

    log = _MetricsLog(os.path.join(out_dir, "stage2_metrics.jsonl"),
                      append=resume_from is not None)
    end_epoch = cfg.train.epochs_stage2
    if stop_after_epoch is not None:
        end_epoch = min(end_epoch, stop_after_epoch + 1)

    if start_epoch >= end_epoch and resume_from is None:
        # zero-epoch run: the output checkpoint equals the input
        save_checkpoint(ckpt_path, student=student, teacher=teacher,
                        optimizer=optimizer, schedule_state=state, cfg=cfg,
                        epoch=start_epoch - 1, stage="stage2",
                        global_iter=global_iter)

    student.train()
    with hide_target_labels():
        for epoch in range(start_epoch, end_epoch):
            rng = np.random.default_rng([cfg.train.seed, 7000 + epoch])
            src_order = rng.permutation(len(src_samples))
            tgt_order = rng.permutation(len(tgt_samples))
            for step in range(steps_per_epoch):
                sched = schedule_at(cfg.schedule, epoch, global_iter,
                                    total_iters, cfg.data.joint_count)
                for group in optimizer.param_groups:
                    group["lr"] = sched.lr
                sidx = src_order[step * batch:(step + 1) * batch]
                tidx = tgt_order[step * batch:(step + 1) * batch]
                b = build_stage2_batch(
                    [src_samples[i] for i in sidx],
                    [tgt_samples[i] for i in tidx],
                    pseudo_map, rng, cfg, flags, flip_pairs,
                )
                optimizer.zero_grad()
                backward, breakdown = compute_stage2_losses(
                    student, teacher, b, sched, flags)
                if not torch.isfinite(backward) or not math.isfinite(breakdown.total):
                    log.close()
                    raise NumericalAbortError(
                        f"non-finite loss at epoch {epoch} step {step}; last "
                        f"checkpoint kept at {ckpt_path}"
                    )
                backward.backward()
                optimizer.step()
                ema_update(teacher, student, cfg.train.ema_alpha)
                if global_iter % cfg.train.log_every == 0:
                    _log_record(log, global_iter, epoch, breakdown, sched)
                global_iter += 1
                state = sched
            save_checkpoint(ckpt_path, student=student, teacher=teacher,
                            optimizer=optimizer, schedule_state=state, cfg=cfg,
                            epoch=epoch, stage="stage2", global_iter=global_iter)
    log.close()
    return ckpt_path


def resume(cfg: TrainConfig, checkpoint: str, pseudo_store: str,
           out_dir: str) -> str:
    """Continue an interrupted adaptation run from its epoch checkpoint."""
    return train(cfg, pretrained_ckpt=checkpoint, pseudo_store=pseudo_store,
                 out_dir=out_dir, resume_from=checkpoint)
