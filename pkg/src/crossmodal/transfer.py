"""Cross-modal transfer: logit distillation, feature distillation and vision-point matching."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .alignment import Module, ce_dice_loss, _empty_loss
from .errors import ShapeError
from .geometry import PointPixelPairing, pixel_values
from .tensor import Tensor
from .vocab import ClassVocabulary


def build_distill_targets(pseudo_labels, base_mask, vocab: ClassVocabulary, novel_only: bool = True) -> np.ndarray:
    """Point targets for logit distillation.

    Annotated (base-mask) points and unpaired points are ignored; with
    ``novel_only`` pseudo-labels naming a base class are ignored as well.
    """
    ignore = vocab.ignore_index
    targets = np.asarray(pseudo_labels, dtype=np.int64).copy()
    targets[np.asarray(base_mask, dtype=bool)] = ignore
    if novel_only:
        targets[vocab.base_mask()[np.clip(targets, 0, ignore)]] = ignore
    return targets


def logit_distill_loss(point_logits: Tensor, targets, vocab: ClassVocabulary) -> Tensor:
    return ce_dice_loss(point_logits, targets, vocab.num_classes)


def feature_distill_loss(image_feats, point_feats: Tensor) -> Tensor:
    """Mean of ``1 - cos`` over paired rows; the image side is treated as a constant."""
    img = Tensor(image_feats.data if isinstance(image_feats, Tensor) else image_feats)
    if img.shape != point_feats.shape:
        raise ShapeError(f"feature distillation: {img.shape} vs {point_feats.shape}")
    if img.shape[0] == 0:
        return _empty_loss()
    cos = T.sum_(T.l2_normalize_rows(img) * T.l2_normalize_rows(point_feats), axis=1)
    return T.mean(1.0 - cos)


class VisionPointMatcher(Module):
    """Attention encoder plus binary classifier over paired image/point features.

    Image rows attend to each other (single-head self-attention with a
    residual), then act as queries in ``heads``-way cross-attention against the
    point rows. Heads are concatenated, passed through a two-layer FFN with a
    residual, and classified into two logits per pair (column 1 = matched).
    """

    def __init__(self, dim: int, heads: int = 2, ffn_hidden: int | None = None, seed: int = 0):
        if dim % heads:
            raise ShapeError(f"model dim {dim} not divisible by {heads} heads")
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.heads = heads
        hidden = ffn_hidden or 2 * dim

        def w(i, o):
            return Tensor(rng.standard_normal((i, o)) / np.sqrt(i), requires_grad=True)

        def b(o):
            return Tensor(np.zeros(o), requires_grad=True)

        self.self_q, self.self_k, self.self_v = w(dim, dim), w(dim, dim), w(dim, dim)
        self.cross_q, self.cross_k, self.cross_v = w(dim, dim), w(dim, dim), w(dim, dim)
        self.ffn_w0, self.ffn_b0 = w(dim, hidden), b(hidden)
        self.ffn_w1, self.ffn_b1 = w(hidden, dim), b(dim)
        self.cls_w0, self.cls_b0 = w(dim, dim), b(dim)
        self.cls_w1, self.cls_b1 = w(dim, 2), b(2)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def __call__(self, image_feats, point_feats, intermediates: dict | None = None) -> Tensor:
        return vpm_forward(image_feats, point_feats, self, intermediates)


def _attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scores = (q @ k.T) * (1.0 / math.sqrt(q.shape[1]))
    return T.softmax_rows(scores) @ v


def vpm_forward(image_feats, point_feats, params: VisionPointMatcher, intermediates: dict | None = None) -> Tensor:
    """Match logits (r x 2) for r paired image/point feature rows."""
    img = image_feats if isinstance(image_feats, Tensor) else Tensor(image_feats)
    pts = point_feats if isinstance(point_feats, Tensor) else Tensor(point_feats)
    if img.ndim != 2 or img.shape != pts.shape or img.shape[1] != params.dim or img.shape[0] < 1:
        raise ShapeError(f"vpm_forward: image {img.shape}, point {pts.shape}, model dim {params.dim}")

    q_atten = img + _attend(img @ params.self_q, img @ params.self_k, img @ params.self_v)

    q, k, v = q_atten @ params.cross_q, pts @ params.cross_k, pts @ params.cross_v
    d = params.head_dim
    xis = [
        _attend(T.cols(q, i * d, (i + 1) * d), T.cols(k, i * d, (i + 1) * d), T.cols(v, i * d, (i + 1) * d))
        for i in range(params.heads)
    ]
    cat = T.concat_cols(xis)
    encoded = cat + T.tanh(cat @ params.ffn_w0 + params.ffn_b0) @ params.ffn_w1 + params.ffn_b1
    logits = T.tanh(encoded @ params.cls_w0 + params.cls_b0) @ params.cls_w1 + params.cls_b1
    if intermediates is not None:
        intermediates.update(q_atten=q_atten, values=v, xis=xis, encoded=encoded)
    return logits


def vpm_match_labels(pairing: PointPixelPairing, point_classes, pixel_classes, ignore_index: int) -> np.ndarray:
    """1 where a pair's point class equals its pixel class (sentinel never matches), else 0."""
    if isinstance(pixel_classes, np.ndarray) and pixel_classes.shape == (len(pairing),):
        pix = pixel_classes
    else:
        pix = pixel_values(pairing, pixel_classes)
    pts = np.asarray(point_classes)[pairing.point_index]
    return ((pix == pts) & (pts != ignore_index) & (pix != ignore_index)).astype(np.int64)


def vpm_loss(match_logits: Tensor, labels) -> Tensor:
    """Binary cross-entropy on the two-way softmax of the match logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if match_logits.shape[0] == 0:
        return _empty_loss()
    if match_logits.ndim != 2 or match_logits.shape[1] != 2 or labels.shape != (match_logits.shape[0],):
        raise ShapeError(f"vpm_loss: logits {match_logits.shape} vs labels {labels.shape}")
    return -T.mean(T.pick(T.log_softmax_rows(match_logits), labels))
