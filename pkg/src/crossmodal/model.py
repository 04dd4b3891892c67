"""The two-branch model: image branch, point branch, text embeddings and matcher."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np

from .alignment import ImageExtractor, PointExtractor, ProjectionHead, TextEmbeddings, compute_logits, embed_text
from .errors import ConfigError
from .serialization import decode_array, encode_array
from .tensor import Tensor, no_grad
from .transfer import VisionPointMatcher
from .vocab import ClassVocabulary

IMAGE_CHANNELS = 3
POINT_CHANNELS = 4


class CrossModalModel:
    def __init__(self, vocab: ClassVocabulary, text_dim: int = 32, feature_dim: int = 32, vpm_heads: int = 2, seed: int = 0, text_seed: int = 0):
        self.vocab = vocab
        self.emb: TextEmbeddings = embed_text(vocab, text_dim, text_seed)
        ss = np.random.SeedSequence([seed, 11]).generate_state(5)
        self.image_extractor = ImageExtractor(IMAGE_CHANNELS, (16, 16, feature_dim), seed=int(ss[0]))
        self.image_head = ProjectionHead(feature_dim, text_dim, seed=int(ss[1]))
        self.point_extractor = PointExtractor(POINT_CHANNELS, (32, 32, feature_dim), seed=int(ss[2]))
        self.point_head = ProjectionHead(feature_dim, text_dim, seed=int(ss[3]))
        self.vpm = VisionPointMatcher(text_dim, heads=vpm_heads, seed=int(ss[4]))

    @classmethod
    def from_options(cls, vocab, options, seed: int) -> "CrossModalModel":
        return cls(vocab, options.text_dim, options.feature_dim, options.vpm_heads, seed=seed)

    # parameter groups -----------------------------------------------------

    def image_named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"image_extractor.{n}", p) for n, p in self.image_extractor.named_parameters()] + [
            (f"image_head.{n}", p) for n, p in self.image_head.named_parameters()
        ]

    def point_named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"point_extractor.{n}", p) for n, p in self.point_extractor.named_parameters()] + [
            (f"point_head.{n}", p) for n, p in self.point_head.named_parameters()
        ]

    def vpm_named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"vpm.{n}", p) for n, p in self.vpm.named_parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.image_named_parameters() + self.point_named_parameters() + self.vpm_named_parameters()

    def image_parameters(self) -> list[Tensor]:
        return [p for _, p in self.image_named_parameters()]

    def point_parameters(self) -> list[Tensor]:
        """Everything updated by the point-branch optimizer, matcher included."""
        return [p for _, p in self.point_named_parameters() + self.vpm_named_parameters()]

    def non_image_checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.point_named_parameters() + self.vpm_named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def copy_image_branch(self) -> tuple[object, object]:
        """Frozen snapshot of the image extractor and head (for a fixed teacher)."""
        return copy.deepcopy(self.image_extractor), copy.deepcopy(self.image_head)

    # inference ------------------------------------------------------------

    def point_logits(self, features: np.ndarray) -> Tensor:
        return compute_logits(self.point_extractor(features), self.point_head, self.emb)

    def predict_points(self, features: np.ndarray) -> np.ndarray:
        return infer_point_labels(features, self.point_extractor, self.point_head, self.emb)

    # persistence ----------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"checkpoint {name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def infer_point_labels(features, extractor, head, emb: TextEmbeddings) -> np.ndarray:
    """Argmax cosine similarity per point; ties resolve to the lowest class id."""
    with no_grad():
        logits = compute_logits(extractor(features), head, emb)
    return np.argmax(logits.data, axis=1).astype(np.int64)


def save_checkpoint(path, model: CrossModalModel, config_hash: str) -> None:
    payload = {
        "format": "crossmodal-checkpoint/1",
        "config_hash": config_hash,
        "parameters": {n: encode_array(a) for n, a in model.state_dict().items()},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    payload = json.loads(Path(path).read_text())
    return {n: decode_array(a) for n, a in payload["parameters"].items()}, payload["config_hash"]
