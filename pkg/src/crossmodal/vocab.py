"""Category vocabulary with a disjoint base/novel split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple[str, ...]
    base_ids: frozenset[int]
    novel_ids: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "base_ids", frozenset(int(i) for i in self.base_ids))
        object.__setattr__(self, "novel_ids", frozenset(int(i) for i in self.novel_ids))
        if len(set(self.names)) != len(self.names):
            raise ConfigError(f"duplicate class names in {self.names}")
        if self.base_ids & self.novel_ids:
            raise ConfigError(f"base and novel ids overlap: {sorted(self.base_ids & self.novel_ids)}")
        if self.base_ids | self.novel_ids != set(range(len(self.names))):
            raise ConfigError("base and novel ids must cover every class id exactly once")

    @classmethod
    def from_split(cls, names, novel_names) -> "ClassVocabulary":
        names = tuple(names)
        unknown = set(novel_names) - set(names)
        if unknown:
            raise ConfigError(f"novel classes not in vocabulary: {sorted(unknown)}")
        novel = {names.index(n) for n in novel_names}
        return cls(names, frozenset(set(range(len(names))) - novel), frozenset(novel))

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def ignore_index(self) -> int:
        """Sentinel id, one past the last valid class."""
        return len(self.names)

    def novel_mask(self) -> np.ndarray:
        """Boolean lookup of length ``num_classes + 1``; the sentinel maps to False."""
        out = np.zeros(self.num_classes + 1, dtype=bool)
        out[sorted(self.novel_ids)] = True
        return out

    def base_mask(self) -> np.ndarray:
        out = np.zeros(self.num_classes + 1, dtype=bool)
        out[sorted(self.base_ids)] = True
        return out


def num_classes_of(vocab) -> int:
    return vocab if isinstance(vocab, int) else vocab.num_classes
