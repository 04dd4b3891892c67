"""Segmentation metrics, the naive projection baseline and the ablation harness."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import RunConfig, StageConfig, TransferOptions
from .errors import ContractError
from .geometry import project_points, transfer_labels
from .model import CrossModalModel
from .scenegen import SyntheticScene
from .serialization import round_floats
from .vocab import ClassVocabulary


@dataclass
class ConfusionMatrix:
    """Rows are GT classes, columns predictions.

    Points whose prediction is the ignore sentinel (e.g. unpaired points in
    the projection baseline) are tallied in ``unassigned`` per GT class and
    count as false negatives.
    """

    counts: np.ndarray
    unassigned: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64), np.zeros(num_classes, dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.unassigned.sum())

    def add(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        if pred.shape != gt.shape:
            raise ContractError(f"prediction length {pred.shape} != ground truth length {gt.shape}")
        c = self.counts.shape[0]
        valid = (gt >= 0) & (gt < c)
        p, g = pred[valid], gt[valid]
        assigned = (p >= 0) & (p < c)
        self.counts += np.bincount(g[assigned] * c + p[assigned], minlength=c * c).reshape(c, c)
        self.unassigned += np.bincount(g[~assigned], minlength=c)
        return self

    def __iadd__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        self.unassigned += other.unassigned
        return self

    def gt_support(self) -> np.ndarray:
        return self.counts.sum(axis=1) + self.unassigned

    def iou(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.gt_support() - tp
        denom = tp + fp + fn
        return np.divide(tp, denom, out=np.zeros_like(tp), where=denom > 0)


def harmonic_iou(miou_base: float, miou_novel: float) -> float:
    s = miou_base + miou_novel
    return 0.0 if s == 0 else 2.0 * miou_base * miou_novel / s


@dataclass
class MetricsReport:
    per_class_iou: list[float]
    miou_base: float
    miou_novel: float
    hiou: float
    class_names: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return round_floats(
            {
                "class_names": list(self.class_names),
                "per_class_iou": [float(x) for x in self.per_class_iou],
                "miou_base": float(self.miou_base),
                "miou_novel": float(self.miou_novel),
                "hiou": float(self.hiou),
                "metadata": dict(self.metadata),
            }
        )

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["per_class_iou"], d["miou_base"], d["miou_novel"], d["hiou"], d.get("class_names", []), d.get("metadata", {}))


def report_from_confusion(conf: ConfusionMatrix, vocab: ClassVocabulary, metadata: dict | None = None) -> MetricsReport:
    """Means skip classes that never occur in the evaluated ground truth."""
    iou = conf.iou()
    present = conf.gt_support() > 0

    def mean_over(ids):
        sel = [i for i in sorted(ids) if present[i]]
        return float(np.mean(iou[sel])) if sel else 0.0

    mb, mn = mean_over(vocab.base_ids), mean_over(vocab.novel_ids)
    return MetricsReport(iou.tolist(), mb, mn, harmonic_iou(mb, mn), list(vocab.names), dict(metadata or {}))


def compute_metrics(pred, gt, vocab: ClassVocabulary, metadata: dict | None = None) -> MetricsReport:
    conf = ConfusionMatrix.empty(vocab.num_classes).add(pred, gt)
    return report_from_confusion(conf, vocab, metadata)


def evaluate_predictions(pairs, vocab: ClassVocabulary, metadata: dict | None = None) -> MetricsReport:
    """Shared metric path: ``pairs`` yields (prediction, ground truth) per scene."""
    conf = ConfusionMatrix.empty(vocab.num_classes)
    for pred, gt in pairs:
        conf.add(pred, gt)
    return report_from_confusion(conf, vocab, metadata)


def evaluate_model(model: CrossModalModel, scenes: list[SyntheticScene], metadata: dict | None = None) -> MetricsReport:
    return evaluate_predictions(
        ((model.predict_points(s.point_features()), s.cloud.gt_labels) for s in scenes), model.vocab, metadata
    )


def projection_predictions(scene: SyntheticScene, vocab: ClassVocabulary) -> np.ndarray:
    return transfer_labels(project_points(scene.cloud, scene.calibs), scene.pseudo_images, vocab)


def run_projection_baseline(scenes: list[SyntheticScene], vocab: ClassVocabulary, metadata: dict | None = None) -> MetricsReport:
    """Label every point with its projected pseudo-label; unpaired points count as misses."""
    return evaluate_predictions(((projection_predictions(s, vocab), s.cloud.gt_labels) for s in scenes), vocab, metadata)


# ablation ------------------------------------------------------------------

VARIANTS: dict[str, dict] = {
    "one-stage/logit": dict(two_stage=False, novel_only=False, feature=False, vpm=False),
    "one-stage/full": dict(two_stage=False, novel_only=True, feature=True, vpm=True),
    "two-stage/logit": dict(two_stage=True, novel_only=False, feature=False, vpm=False),
    "two-stage/logit+novel": dict(two_stage=True, novel_only=True, feature=False, vpm=False),
    "two-stage/logit+novel+feature": dict(two_stage=True, novel_only=True, feature=True, vpm=False),
    "two-stage/full": dict(two_stage=True, novel_only=True, feature=True, vpm=True),
}


def variant_settings(name: str, stage: StageConfig, options: TransferOptions) -> tuple[StageConfig, TransferOptions]:
    """Stage and transfer settings for one ablation row at an unchanged total step budget."""
    if name not in VARIANTS:
        raise ContractError(f"unknown ablation variant {name!r}; choose from {sorted(VARIANTS)}")
    v = VARIANTS[name]
    total = stage.stage1_steps + stage.stage2_steps
    if v["two_stage"]:
        st = stage if stage.stage1_steps else replace(stage, stage1_steps=total // 2, stage2_steps=total - total // 2)
    else:
        st = replace(stage, stage1_steps=0, stage2_steps=total)
    opt = replace(options, novel_only=v["novel_only"], use_feature_distill=v["feature"], use_vpm=v["vpm"])
    return st, opt


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def run_ablation(
    config: RunConfig,
    train: list[SyntheticScene],
    evaluation: list[SyntheticScene],
    variants=None,
    seeds=None,
    progress=None,
) -> list[dict]:
    """Train each variant for every seed; rows carry per-seed reports plus mean/std of base/novel mIoU."""
    from .trainer import run_two_stage

    vocab = config.vocab.build()
    rows = []
    for name in variants or config.eval.variants:
        st, opt = variant_settings(name, config.trainer, config.transfer)
        opt = config.effective_transfer(opt)
        reports = []
        for seed in seeds if seeds is not None else config.eval.seeds:
            model, _ = run_two_stage(train, replace(st, seed=int(seed)), st.weights, opt, vocab=vocab)
            rep = evaluate_model(model, evaluation, {"variant": name, "seed": int(seed), "config_hash": config.config_hash()})
            reports.append(rep)
            if progress:
                progress(name, seed, rep)
        mb, sb = _mean_std([r.miou_base for r in reports])
        mn, sn = _mean_std([r.miou_novel for r in reports])
        rows.append(
            {
                "variant": name,
                "miou_base_mean": mb,
                "miou_base_std": sb,
                "miou_novel_mean": mn,
                "miou_novel_std": sn,
                "reports": [r.to_dict() for r in reports],
            }
        )
    return round_floats(rows)
