"""Weighted four-loss objective and the two-stage training schedule.

Stage 1 trains the image branch alone on 2D pseudo-labels with global-norm
gradient clipping. Stage 2 trains both branches jointly: the live image
branch labels the projected points (teacher), the point branch learns from
base 3D labels, distilled novel-class logits, paired image features and the
vision-point matching task. Each step consumes one scene.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .alignment import compute_logits, image_branch_loss, point_branch_loss, project_normalized
from .config import LossWeights, StageConfig, TransferOptions
from .errors import ContractError, TrainingError
from .geometry import project_points, transfer_labels
from .model import CrossModalModel
from .scenegen import SyntheticScene
from .tensor import AdamWState, Tensor
from .transfer import (
    build_distill_targets,
    feature_distill_loss,
    logit_distill_loss,
    vpm_loss,
    vpm_match_labels,
)

COMPONENTS = ("image", "point", "distill_logit", "distill_feat", "vpm")


@dataclass
class TrainState:
    step: int = 0
    stage: int = 1
    image_opt: AdamWState = field(default_factory=AdamWState)
    point_opt: AdamWState = field(default_factory=AdamWState)
    losses: list[dict] = field(default_factory=list)
    grad_norms: list[dict] = field(default_factory=list)
    checksums: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: StageConfig) -> "TrainState":
        return cls(
            image_opt=AdamWState(lr=cfg.image_lr, weight_decay=cfg.image_weight_decay),
            point_opt=AdamWState(lr=cfg.point_lr, weight_decay=cfg.point_weight_decay),
        )

    def component_log(self, stage: int | None = None) -> dict[int, dict[str, float]]:
        out: dict[int, dict[str, float]] = {}
        for rec in self.losses:
            if stage is None or rec["stage"] == stage:
                out.setdefault(rec["step"], {})[rec["component"]] = rec["value"]
        return out

    def write_log(self, path) -> None:
        with Path(path).open("w") as fh:
            for rec in self.losses:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(l_image, l_point, l_distill_logit, l_distill_feat, l_vpm, w: LossWeights):
    """beta*image + delta*point + gamma*(logit + feature distillation) + gamma*vpm."""
    parts = dict(zip(COMPONENTS, (l_image, l_point, l_distill_logit, l_distill_feat, l_vpm)))
    for name, val in parts.items():
        if not math.isfinite(_value(val)):
            raise TrainingError(f"loss component {name!r} is not finite")
    return w.beta * l_image + w.delta * l_point + w.gamma * (l_distill_logit + l_distill_feat) + w.gamma * l_vpm


def point_lr(cfg: StageConfig, i: int) -> float:
    """Point-branch learning rate at stage-2 step ``i``; cosine decays to zero at the end."""
    if cfg.point_lr_schedule == "cosine" and cfg.stage2_steps > 0:
        return cfg.point_lr * 0.5 * (1.0 + math.cos(math.pi * i / cfg.stage2_steps))
    return cfg.point_lr


def _scene_order(n_scenes: int, steps: int, seed: int, stage: int) -> np.ndarray:
    rng = np.random.default_rng([seed, stage, 3])
    reps = -(-steps // max(n_scenes, 1))
    return np.concatenate([rng.permutation(n_scenes) for _ in range(reps)])[:steps] if steps else np.zeros(0, np.int64)


def _sample_pixels(pseudo: np.ndarray, n: int, ignore: int, rng: np.random.Generator) -> np.ndarray:
    labelled = np.flatnonzero(pseudo.reshape(-1) != ignore)
    if labelled.size > n:
        labelled = np.sort(rng.choice(labelled, n, replace=False))
    return labelled


def _fill_missing_grads(params) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def _check_divergence(value: float, cfg: StageConfig, step: int) -> None:
    if not math.isfinite(value) or value > cfg.divergence_limit:
        raise TrainingError(f"training diverged at step {step}: loss {value}")


def _log(state: TrainState, stage: int, values: dict[str, float]) -> None:
    for name, val in values.items():
        state.losses.append({"step": state.step, "stage": stage, "component": name, "value": float(val)})


def train_stage1(model: CrossModalModel, dataset: list[SyntheticScene], state: TrainState, cfg: StageConfig) -> TrainState:
    """Image branch only, with gradient clipping; other parameters are untouched."""
    if state.stage != 1:
        raise ContractError(f"train_stage1 called in stage {state.stage}")
    params = model.image_parameters()
    ignore = model.vocab.ignore_index
    rng = np.random.default_rng([cfg.seed, 1, 5])
    for idx in _scene_order(len(dataset), cfg.stage1_steps, cfg.seed, 1):
        scene = dataset[idx]
        pixels = _sample_pixels(scene.pseudo_images, cfg.pixels_per_step, ignore, rng)
        feats = model.image_extractor(scene.appearance(), pixels)
        logits = compute_logits(feats, model.image_head, model.emb) * cfg.logit_scale
        loss = image_branch_loss(logits, scene.pseudo_images.reshape(-1)[pixels], model.vocab)
        _check_divergence(loss.item(), cfg, state.step)

        T.zero_grad(params)
        T.backward(loss)
        _fill_missing_grads(params)
        pre = T.clip_grad_global_norm(params, cfg.clip_norm)
        post = T.global_grad_norm(params)
        T.adamw_step(params, state.image_opt)

        _log(state, 1, {"image": loss.item()})
        state.grad_norms.append({"step": state.step, "stage": 1, "branch": "image", "pre_clip": pre, "applied": post})
        state.checksums.append({"step": state.step, "checksum": model.non_image_checksum()})
        state.step += 1
    state.stage = 2
    return state


def _teacher_outputs(model, images, pixels, teacher, scale):
    extractor, head = teacher
    with T.no_grad():
        proj = project_normalized(extractor(images, pixels), head)
    return proj.data, proj.data @ model.emb.matrix.T * scale


def train_stage2(
    model: CrossModalModel,
    dataset: list[SyntheticScene],
    state: TrainState,
    cfg: StageConfig,
    weights: LossWeights | None = None,
    options: TransferOptions | None = None,
) -> TrainState:
    """Joint training of both branches with the weighted objective; no clipping."""
    if state.stage != 2:
        raise ContractError(f"train_stage2 called in stage {state.stage}")
    w = weights or cfg.weights
    opt = options or TransferOptions()
    vocab = model.vocab
    ignore = vocab.ignore_index
    image_params = model.image_parameters()
    point_params = model.point_parameters()
    all_params = image_params + point_params
    rng = np.random.default_rng([cfg.seed, 2, 5])
    frozen_teacher = model.copy_image_branch() if cfg.freeze_teacher else None
    need_teacher = w.gamma > 0 and (opt.use_logit_distill or opt.use_feature_distill or opt.use_vpm)
    scale = cfg.logit_scale

    for i, idx in enumerate(_scene_order(len(dataset), cfg.stage2_steps, cfg.seed, 2)):
        scene = dataset[idx]
        cloud = scene.cloud
        k, h, wd = scene.pseudo_images.shape
        zero = T.Tensor(0.0)
        l_image = l_point = l_dl = l_df = l_vpm = zero

        pairing = project_points(cloud, scene.calibs)
        flat_pix = pairing.camera_index * h * wd + pairing.v * wd + pairing.u
        sampled = _sample_pixels(scene.pseudo_images, cfg.pixels_per_step, ignore, rng)

        images = scene.appearance() if (w.beta > 0 or need_teacher) else None
        if w.beta > 0:
            feats = model.image_extractor(images, sampled)
            logits = compute_logits(feats, model.image_head, model.emb) * scale
            l_image = image_branch_loss(logits, scene.pseudo_images.reshape(-1)[sampled], vocab)

        if need_teacher:
            if len(pairing) > opt.r_max:
                sub = np.sort(rng.choice(len(pairing), opt.r_max, replace=False))
            else:
                sub = np.arange(len(pairing))
            # the teacher never predicts the sentinel, so label transfer only
            # reads each point's lowest-camera entry
            first = np.unique(pairing.point_index, return_index=True)[1]
            needed = np.union1d(first, sub)
            uniq, inv = np.unique(flat_pix[needed], return_inverse=True)
            teacher = frozen_teacher or (model.image_extractor, model.image_head)
            tp, tl = _teacher_outputs(model, images, uniq, teacher, scale)
            teacher_proj = np.zeros((len(pairing), tp.shape[1]))
            teacher_logits = np.zeros((len(pairing), tl.shape[1]))
            teacher_proj[needed], teacher_logits[needed] = tp[inv], tl[inv]

        feats_p = project_normalized(model.point_extractor(scene.point_features()), model.point_head)
        logits_p = (feats_p @ T.Tensor(model.emb.matrix.T)) * scale
        point_pred = np.argmax(logits_p.data, axis=1)

        if w.delta > 0 and cloud.base_mask.any():
            labels = np.where(cloud.base_mask, cloud.gt_labels, ignore)
            l_point = point_branch_loss(logits_p, labels, vocab, base_only=True)

        if need_teacher:
            # per-entry teacher class: argmax of sigmoid(L_I) at the projected pixel
            pixel_cls = np.full(len(pairing), ignore, dtype=np.int64)
            pixel_cls[needed] = np.argmax(T.sigmoid(T.Tensor(teacher_logits[needed])).data, axis=1)
            teacher_imgs = np.full((k, h, wd), ignore, dtype=np.int64)
            teacher_imgs[pairing.camera_index[needed], pairing.v[needed], pairing.u[needed]] = pixel_cls[needed]
            pseudo = transfer_labels(pairing, teacher_imgs, vocab)
            targets = build_distill_targets(pseudo, cloud.base_mask, vocab, novel_only=opt.novel_only)

            sub_pairing = pairing.subset(sub)
            sub_cls = pixel_cls[sub]

            if (opt.use_vpm or opt.use_vpm_filter) and len(sub):
                pts_rows = T.gather_rows(feats_p, sub_pairing.point_index)
                match_logits = model.vpm(teacher_proj[sub], pts_rows)
                if opt.use_vpm:
                    labels = vpm_match_labels(sub_pairing, point_pred, sub_cls, ignore)
                    l_vpm = vpm_loss(match_logits, labels)
                if opt.use_vpm_filter:
                    prob = T.softmax_rows(T.Tensor(match_logits.data)).data[:, 1]
                    targets[sub_pairing.point_index[prob < 0.5]] = ignore

            if opt.use_logit_distill:
                l_dl = logit_distill_loss(logits_p, targets, vocab)

            if opt.use_feature_distill:
                keep = (sub_cls == point_pred[sub_pairing.point_index]) & (sub_cls != ignore)
                if keep.any():
                    l_df = feature_distill_loss(teacher_proj[sub][keep], T.gather_rows(feats_p, sub_pairing.point_index[keep]))

        loss = total_loss(l_image, l_point, l_dl, l_df, l_vpm, w)
        _check_divergence(_value(loss), cfg, state.step)

        T.zero_grad(all_params)
        if isinstance(loss, Tensor):
            T.backward(loss)
        _fill_missing_grads(all_params)
        state.grad_norms.append(
            {
                "step": state.step,
                "stage": 2,
                "image": T.global_grad_norm(image_params),
                "point": T.global_grad_norm(point_params),
            }
        )
        T.adamw_step(image_params, state.image_opt)
        state.point_opt.lr = point_lr(cfg, i)
        T.adamw_step(point_params, state.point_opt)

        _log(state, 2, {name: _value(v) for name, v in zip(COMPONENTS, (l_image, l_point, l_dl, l_df, l_vpm))})
        state.step += 1
    return state


def run_two_stage(
    dataset: list[SyntheticScene],
    cfg: StageConfig,
    weights: LossWeights | None = None,
    options: TransferOptions | None = None,
    model: CrossModalModel | None = None,
    vocab=None,
) -> tuple[CrossModalModel, TrainState]:
    """Stage 1 then stage 2 from a freshly seeded model (or the one given)."""
    opt = options or TransferOptions()
    if model is None:
        if vocab is None:
            raise ContractError("run_two_stage needs a model or a vocabulary")
        model = CrossModalModel.from_options(vocab, opt, seed=cfg.seed)
    state = TrainState.fresh(cfg)
    train_stage1(model, dataset, state, cfg)
    train_stage2(model, dataset, state, cfg, weights or cfg.weights, opt)
    return model, state
