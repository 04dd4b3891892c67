import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossmodal.alignment import ProjectionHead, TextEmbeddings, embed_text
from crossmodal.config import RunConfig, StageConfig, TransferOptions
from crossmodal.errors import ContractError
from crossmodal.evaluation import (
    VARIANTS,
    ConfusionMatrix,
    MetricsReport,
    compute_metrics,
    harmonic_iou,
    projection_predictions,
    run_ablation,
    run_projection_baseline,
    variant_settings,
)
from crossmodal.geometry import project_points
from crossmodal.model import infer_point_labels
from crossmodal.scenegen import NoiseModel, SceneSpec, make_dataset
from crossmodal.tensor import Tensor
from crossmodal.vocab import ClassVocabulary

VOCAB = ClassVocabulary.from_split(["ground", "box-A", "cylinder-A", "box-B", "cylinder-B"], ["box-B", "cylinder-B"])
IGN = VOCAB.ignore_index
unit = st.floats(0.0, 1.0, allow_nan=False)


# harmonic IoU


@pytest.mark.parametrize("base, novel, expected, tol", [(76.9, 66.5, 71.3, 0.05), (75.9, 62.2, 68.4, 0.1)])
def test_harmonic_iou_reference_rows(base, novel, expected, tol):
    assert abs(harmonic_iou(base, novel) - expected) <= tol


def test_harmonic_iou_zero():
    assert harmonic_iou(0.0, 0.0) == 0.0


@given(st.floats(1e-6, 1.0))
def test_harmonic_iou_of_equal_pair(a):
    assert harmonic_iou(a, a) == pytest.approx(a, rel=1e-12)


@given(unit, unit)
def test_harmonic_iou_mean_inequalities(a, b):
    h = harmonic_iou(a, b)
    assert h <= (a + b) / 2 + 1e-12
    assert h <= math.sqrt(a * b) + 1e-12


# confusion matrix and reports


def test_perfect_prediction():
    gt = np.array([0, 1, 2, 3, 4, 4, 0])
    rep = compute_metrics(gt, gt, VOCAB)
    assert rep.per_class_iou == [1.0] * 5
    assert rep.miou_base == rep.miou_novel == rep.hiou == 1.0


def test_iou_hand_counts():
    gt = np.array([0, 0, 1, 1, 3, IGN])
    pred = np.array([0, 1, 1, 1, 0, 2])
    rep = compute_metrics(pred, gt, VOCAB)
    # class 0: tp 1, fp 1, fn 1; class 1: tp 2, fp 1; class 3: fn 1
    np.testing.assert_allclose(rep.per_class_iou, [1 / 3, 2 / 3, 0.0, 0.0, 0.0])
    assert rep.miou_base == pytest.approx(0.5)  # class 2 absent from GT
    assert rep.miou_novel == 0.0  # class 3 present, class 4 absent


def test_length_mismatch():
    with pytest.raises(ContractError):
        compute_metrics(np.zeros(3), np.zeros(4), VOCAB)


def test_unassigned_predictions_are_misses():
    conf = ConfusionMatrix.empty(5).add(np.array([IGN, 0]), np.array([0, 0]))
    assert conf.unassigned.tolist() == [1, 0, 0, 0, 0]
    assert conf.iou()[0] == 0.5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 200))
def test_counts_cover_non_ignored_points(seed, n):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, IGN + 1, n)
    pred = rng.integers(0, IGN + 1, n)
    conf = ConfusionMatrix.empty(5).add(pred, gt)
    assert conf.total == int(np.sum(gt != IGN))
    assert np.all(conf.counts >= 0)
    iou = conf.iou()
    assert np.all((iou >= 0) & (iou <= 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    gt, pred = rng.integers(0, IGN + 1, 80), rng.integers(0, 5, 80)
    perm = rng.permutation(80)
    a, b = compute_metrics(pred, gt, VOCAB), compute_metrics(pred[perm], gt[perm], VOCAB)
    assert a.to_dict() == b.to_dict()


def test_report_json_layout():
    rep = MetricsReport([0.1234567891, 1.0, 0, 0, 0], 1 / 3, 0.2, harmonic_iou(1 / 3, 0.2), list(VOCAB.names), {"seed": 1})
    d = rep.to_dict()
    assert list(d) == ["class_names", "per_class_iou", "miou_base", "miou_novel", "hiou", "metadata"]
    assert d["per_class_iou"][0] == 0.123457 and d["miou_base"] == 0.333333
    assert MetricsReport.from_dict(json.loads(json.dumps(d))).to_dict() == d


# inference


def test_infer_colinear_feature():
    emb = embed_text(VOCAB, 8, seed=0)
    head = ProjectionHead(8, 8)
    head.weight.data[...] = np.eye(8)
    assert infer_point_labels(emb.matrix[1:2] * 2.5, lambda x: Tensor(x), head, emb).tolist() == [1]


def test_infer_tie_breaks_low():
    emb = TextEmbeddings(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]), ("a", "b", "c"), 0)
    head = ProjectionHead(2, 2)
    head.weight.data[...] = np.eye(2)
    assert infer_point_labels(np.array([[1.0, 0.0]]), lambda x: Tensor(x), head, emb).tolist() == [0]


def test_infer_matches_loop(rng):
    emb = embed_text(VOCAB, 8, seed=2)
    head = ProjectionHead(6, 8, seed=3)
    feats = rng.normal(size=(20, 6))
    got = infer_point_labels(feats, lambda x: Tensor(x), head, emb)
    for i in range(20):
        z = feats[i] @ head.weight.data
        sims = [z @ e / np.linalg.norm(z) for e in emb.matrix]
        assert got[i] == int(np.argmax(sims))


# projection baseline

SPARSE = SceneSpec(n_cameras=2, image_size=64, focal=45.0, ground_points=1500, points_per_object=(150, 300), object_count=(4, 6))


def test_baseline_zero_noise_hits_coverage_ceiling():
    scenes = make_dataset(replace(SPARSE, noise=NoiseModel.zero()), VOCAB, range(4))
    rep = run_projection_baseline(scenes, VOCAB)
    paired = np.zeros(5)
    total = np.zeros(5)
    for s in scenes:
        seen = np.zeros(len(s.cloud), dtype=bool)
        seen[project_points(s.cloud, s.calibs).point_index] = True
        for c in range(5):
            total[c] += np.sum(s.cloud.gt_labels == c)
            paired[c] += np.sum((s.cloud.gt_labels == c) & seen)
    ceiling = np.divide(paired, total, out=np.zeros(5), where=total > 0)
    assert ceiling.min() < 1.0  # two cameras leave some points unseen
    np.testing.assert_allclose(rep.per_class_iou, ceiling, atol=1e-12)


def test_baseline_total_dropout_is_zero():
    scenes = make_dataset(replace(SPARSE, noise=NoiseModel(0.0, 0.0, 0.0, 1.0, 0)), VOCAB, range(2))
    rep = run_projection_baseline(scenes, VOCAB)
    assert rep.miou_base == rep.miou_novel == 0.0


def test_baseline_and_model_share_metric_path():
    scenes = make_dataset(SPARSE, VOCAB, range(2))
    preds = np.concatenate([projection_predictions(s, VOCAB) for s in scenes])
    gts = np.concatenate([s.cloud.gt_labels for s in scenes])
    assert run_projection_baseline(scenes, VOCAB).to_dict() == compute_metrics(preds, gts, VOCAB).to_dict()


# ablation


def test_variants_mirror_six_rows():
    assert list(VARIANTS) == RunConfig().eval.variants
    assert len(VARIANTS) == 6
    assert sum(not v["two_stage"] for v in VARIANTS.values()) == 2


def test_variant_budgets_match():
    base = StageConfig(stage1_steps=30, stage2_steps=70)
    for name in VARIANTS:
        st_, _ = variant_settings(name, base, TransferOptions())
        assert st_.stage1_steps + st_.stage2_steps == 100
    assert variant_settings("one-stage/full", base, TransferOptions())[0].stage1_steps == 0
    with pytest.raises(ContractError):
        variant_settings("three-stage", base, TransferOptions())


def test_identical_variants_give_identical_rows():
    cfg = RunConfig(
        scene=SPARSE,
        trainer=StageConfig(stage1_steps=3, stage2_steps=3, pixels_per_step=256),
        transfer=TransferOptions(text_dim=16, feature_dim=16, r_max=64),
    )
    scenes = make_dataset(SPARSE, VOCAB, range(3))
    rows = run_ablation(cfg, scenes, scenes[:2], variants=["two-stage/full", "two-stage/full"], seeds=[0, 1])
    assert rows[0] == rows[1]
    assert set(rows[0]) == {"variant", "miou_base_mean", "miou_base_std", "miou_novel_mean", "miou_novel_std", "reports"}
