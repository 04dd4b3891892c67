"""Text embeddings, toy feature extractors, cosine logit heads and segmentation losses."""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor
from .vocab import ClassVocabulary, num_classes_of

DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class TextEmbeddings:
    matrix: np.ndarray
    names: tuple[str, ...]
    seed: int

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def frozen(self) -> bool:
        return True


def _name_rng(name: str, seed: int, attempt: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{name}\x00{seed}\x00{attempt}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def embed_text(vocab: ClassVocabulary, dim: int, seed: int = 0, max_cos: float = 0.5, max_tries: int = 1000) -> TextEmbeddings:
    """Frozen pseudo-encoder: one unit vector per class name, pairwise |cos| < ``max_cos``."""
    names = vocab.names if isinstance(vocab, ClassVocabulary) else tuple(vocab)
    if dim < len(names):
        warnings.warn(f"embedding dim {dim} is smaller than the {len(names)} classes", stacklevel=2)
    rows: list[np.ndarray] = []
    for name in names:
        for attempt in range(max_tries):
            vec = _name_rng(name, seed, attempt).standard_normal(dim)
            vec /= np.linalg.norm(vec)
            if all(abs(vec @ r) < max_cos for r in rows):
                rows.append(vec)
                break
        else:
            raise ConfigError(f"could not place embedding for {name!r} in {max_tries} tries; increase dim ({dim})")
    matrix = np.stack(rows)
    matrix.setflags(write=False)
    return TextEmbeddings(matrix, tuple(names), seed)


def _he(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


class Module:
    """Anything holding named trainable tensors."""

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((key, val))
            elif isinstance(val, Module):
                out.extend((f"{key}.{n}", p) for n, p in val.named_parameters())
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class PointExtractor(Module):
    """Three-layer pointwise MLP, N x F_in -> N x D_feat."""

    kind = "point"

    def __init__(self, in_dim: int, widths=(32, 32, 32), seed: int = 0):
        rng = np.random.default_rng(seed)
        dims = (in_dim, *widths)
        self.widths = tuple(widths)
        self.in_dim = in_dim
        for i in range(len(widths)):
            setattr(self, f"w{i}", Tensor(_he(rng, dims[i], dims[i + 1]), requires_grad=True))
            setattr(self, f"b{i}", Tensor(np.zeros(dims[i + 1]), requires_grad=True))

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def __call__(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.shape[1] != self.in_dim:
            raise ShapeError(f"point extractor expects {self.in_dim} input features, got {h.shape}")
        n = len(self.widths)
        for i in range(n):
            h = h @ getattr(self, f"w{i}") + getattr(self, f"b{i}")
            if i < n - 1:
                h = T.relu(h)
        return h


@lru_cache(maxsize=8)
def _neighbour_table(k: int, h: int, w: int) -> np.ndarray:
    """(k*h*w, 9) flat indices of each pixel's 3x3 neighbourhood, -1 outside the image."""
    v, u = np.mgrid[0:h, 0:w]
    cols = []
    for dv in (-1, 0, 1):
        for du in (-1, 0, 1):
            vv, uu = v + dv, u + du
            ok = (vv >= 0) & (vv < h) & (uu >= 0) & (uu < w)
            cols.append(np.where(ok, vv * w + uu, -1).reshape(-1))
    local = np.stack(cols, axis=1)
    table = np.concatenate([np.where(local >= 0, local + cam * h * w, -1) for cam in range(k)])
    table.setflags(write=False)
    return table


class ImageExtractor(Module):
    """Two 3x3 local-mixing layers followed by a pointwise layer.

    Input is a stack of K images (K, H, W, F_in); output rows correspond to
    flat pixel indices ``cam * H * W + v * W + u``. Passing ``pixels`` evaluates
    only those rows, touching just the layer-1 activations they depend on.
    """

    kind = "image"

    def __init__(self, in_dim: int, widths=(16, 16, 32), seed: int = 0):
        rng = np.random.default_rng(seed)
        c1, c2, out = widths
        self.widths = tuple(widths)
        self.in_dim = in_dim
        self.w0 = Tensor(_he(rng, 9 * in_dim, c1), requires_grad=True)
        self.b0 = Tensor(np.zeros(c1), requires_grad=True)
        self.w1 = Tensor(_he(rng, 9 * c1, c2), requires_grad=True)
        self.b1 = Tensor(np.zeros(c2), requires_grad=True)
        self.w2 = Tensor(_he(rng, c2, out), requires_grad=True)
        self.b2 = Tensor(np.zeros(out), requires_grad=True)

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def __call__(self, images: np.ndarray, pixels: np.ndarray | None = None) -> Tensor:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        k, h, w, f = images.shape
        if f != self.in_dim:
            raise ShapeError(f"image extractor expects {self.in_dim} channels, got {images.shape}")
        table = _neighbour_table(k, h, w)
        flat = images.reshape(-1, f)
        if pixels is None:
            pixels = np.arange(k * h * w)
        pixels = np.asarray(pixels, dtype=np.int64)

        outer = table[pixels]
        need = np.unique(outer[outer >= 0])
        inner = table[need]
        x0 = np.where((inner >= 0)[..., None], flat[np.maximum(inner, 0)], 0.0).reshape(len(need), 9 * f)
        h1 = T.relu(Tensor(x0) @ self.w0 + self.b0)

        pos = np.searchsorted(need, np.maximum(outer, 0))
        pos = np.where(outer >= 0, pos, -1)
        x1 = T.gather_rows(h1, pos).reshape(len(pixels), 9 * self.widths[0])
        h2 = T.relu(x1 @ self.w1 + self.b1)
        return h2 @ self.w2 + self.b2


class ProjectionHead(Module):
    """Linear map from extractor features into the text embedding space."""

    def __init__(self, in_dim: int, text_dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.weight = Tensor(rng.standard_normal((in_dim, text_dim)) / np.sqrt(in_dim), requires_grad=True)

    def __call__(self, features: Tensor) -> Tensor:
        return features @ self.weight


def project_normalized(features: Tensor, head: ProjectionHead) -> Tensor:
    """Head projection followed by row-wise L2 normalization."""
    if features.shape[1] != head.weight.shape[0]:
        raise ShapeError(f"features {features.shape} do not match head {head.weight.shape}")
    return T.l2_normalize_rows(head(features))


def compute_logits(features: Tensor, head: ProjectionHead, emb: TextEmbeddings) -> Tensor:
    """Cosine similarity between projected features and every class embedding (M x C)."""
    if head.weight.shape[1] != emb.dim:
        raise ShapeError(f"head output {head.weight.shape} does not match text dim {emb.matrix.shape}")
    return project_normalized(features, head) @ Tensor(emb.matrix.T)


def _empty_loss() -> Tensor:
    out = Tensor(0.0)
    out.empty = True
    return out


def ce_dice_terms(logits: Tensor, labels, num_classes: int, smooth: float = DICE_SMOOTH) -> tuple[Tensor, Tensor]:
    """Cross-entropy (mean over valid rows) and soft dice (mean over classes present in the targets).

    Rows whose label equals ``num_classes`` (the sentinel) are skipped.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] != num_classes or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape} for {num_classes} classes")
    valid = np.nonzero((labels >= 0) & (labels < num_classes))[0]
    if valid.size == 0:
        return _empty_loss(), _empty_loss()
    y = labels[valid]
    sel = T.gather_rows(logits, valid) if valid.size < labels.size else logits
    logp = T.log_softmax_rows(sel)
    ce = -T.mean(T.pick(logp, y))

    prob = T.exp(logp)
    onehot = np.zeros((valid.size, num_classes))
    onehot[np.arange(valid.size), y] = 1.0
    inter = T.sum_(prob * Tensor(onehot), axis=0)
    denom = T.sum_(prob, axis=0) + Tensor(onehot.sum(axis=0) + smooth)
    dice = 1.0 - (2.0 * inter + smooth) / denom
    present = np.nonzero(onehot.sum(axis=0) > 0)[0]
    return ce, T.mean(T.gather_rows(dice, present))


def ce_dice_loss(logits: Tensor, labels, num_classes: int) -> Tensor:
    ce, dice = ce_dice_terms(logits, labels, num_classes)
    if ce.empty:
        return ce
    return ce + dice


def image_branch_loss(logits: Tensor, pseudo_labels, vocab) -> Tensor:
    """CE + dice of pixel logits against (possibly noisy) 2D pseudo-labels."""
    return ce_dice_loss(logits, pseudo_labels, num_classes_of(vocab))


def point_branch_loss(logits: Tensor, gt_labels, vocab: ClassVocabulary, base_only: bool = True) -> Tensor:
    """CE + dice of point logits against 3D labels; novel classes are masked when ``base_only``."""
    labels = np.asarray(gt_labels, dtype=np.int64).copy()
    if base_only:
        labels[vocab.novel_mask()[np.clip(labels, 0, vocab.num_classes)]] = vocab.ignore_index
    return ce_dice_loss(logits, labels, vocab.num_classes)
