"""Class vocabularies, semantic embedding tables, and seen/unseen splits.

The embedding file format is plain UTF-8 text, one row per class:
``class_name,v1,v2,...,vd`` with decimal float literals, no header, LF
line endings.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BACKGROUND",
    "ClassVocabulary",
    "EmbeddingTable",
    "SplitSpec",
    "EmbeddingFormatError",
    "load_embedding_table",
    "save_embedding_table",
    "generate_synthetic_embeddings",
    "concat_embeddings",
    "make_split",
]

BACKGROUND = "background"


class EmbeddingFormatError(ValueError):
    """An embedding file violates the documented text format."""


class ClassVocabulary:
    """Ordered class names; index 0 is always the background class."""

    def __init__(self, names: Sequence[str]):
        names = tuple(names)
        if not names:
            raise ValueError("vocabulary must not be empty")
        if names[0] != BACKGROUND:
            raise ValueError(f"index 0 must be {BACKGROUND!r}, got {names[0]!r}")
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        self.names = names
        self._index = {name: i for i, name in enumerate(names)}

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown class name {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __eq__(self, other) -> bool:
        return isinstance(other, ClassVocabulary) and self.names == other.names

    def __repr__(self) -> str:
        return f"ClassVocabulary({len(self.names)} classes)"


class EmbeddingTable:
    """One d-dimensional vector per vocabulary class, in vocabulary order."""

    def __init__(self, class_names: Sequence[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        names = tuple(class_names)
        if vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {vectors.shape}")
        if vectors.shape[0] != len(names):
            raise ValueError(
                f"{len(names)} classes but {vectors.shape[0]} embedding rows"
            )
        if vectors.shape[1] < 1:
            raise ValueError("embedding dimension must be at least 1")
        if not np.isfinite(vectors).all():
            raise ValueError("embedding vectors must be finite")
        for i in range(len(names)):
            for j in range(i + 1, len(names)):
                if np.array_equal(vectors[i], vectors[j]):
                    raise ValueError(
                        f"classes {names[i]!r} and {names[j]!r} share one embedding"
                    )
        self.class_names = names
        self.vectors = vectors

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def vector(self, class_index: int) -> np.ndarray:
        return self.vectors[class_index]

    def __len__(self) -> int:
        return len(self.class_names)

    def __repr__(self) -> str:
        return f"EmbeddingTable({len(self.class_names)} classes, d={self.dim})"


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint seen/unseen class-index sets covering the full vocabulary."""

    seen: frozenset[int]
    unseen: frozenset[int]
    n_classes: int

    def __post_init__(self):
        if self.seen & self.unseen:
            raise ValueError("seen and unseen classes overlap")
        if not self.unseen:
            raise ValueError("unseen set must not be empty")
        if 0 in self.unseen:
            raise ValueError("background cannot be an unseen class")
        if 0 not in self.seen:
            raise ValueError("background must be a seen class")
        if self.seen | self.unseen != frozenset(range(self.n_classes)):
            raise ValueError("seen and unseen must cover the vocabulary exactly")

    @property
    def seen_objects(self) -> tuple[int, ...]:
        """Seen classes excluding background, ascending."""
        return tuple(sorted(self.seen - {0}))

    @property
    def unseen_sorted(self) -> tuple[int, ...]:
        return tuple(sorted(self.unseen))


def load_embedding_table(path: str | Path, vocab: ClassVocabulary) -> EmbeddingTable:
    """Parse an embedding file and align its rows to the vocabulary order."""
    path = Path(path)
    rows: dict[str, np.ndarray] = {}
    dim: int | None = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(",")
            if len(fields) < 2:
                raise EmbeddingFormatError(f"{path}:{lineno}: expected name,v1,...,vd")
            name = fields[0]
            if name not in vocab:
                raise EmbeddingFormatError(f"{path}:{lineno}: unknown class {name!r}")
            if name in rows:
                raise EmbeddingFormatError(f"{path}:{lineno}: duplicate class {name!r}")
            try:
                vec = np.array([float(f) for f in fields[1:]], dtype=np.float64)
            except ValueError:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: non-numeric field in row for {name!r}"
                ) from None
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: row has {vec.size} values, expected {dim}"
                )
            rows[name] = vec
    missing = [name for name in vocab if name not in rows]
    if missing:
        raise EmbeddingFormatError(f"{path}: missing class {missing[0]!r}")
    vectors = np.stack([rows[name] for name in vocab])
    return EmbeddingTable(vocab.names, vectors)


def save_embedding_table(table: EmbeddingTable, path: str | Path) -> None:
    """Write the text format; float repr round-trips bit-exactly."""
    lines = []
    for name, vec in zip(table.class_names, table.vectors):
        lines.append(name + "," + ",".join(repr(float(v)) for v in vec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def generate_synthetic_embeddings(
    n_classes: int,
    dim: int,
    seed: int | Sequence[int],
    names: Sequence[str] | None = None,
) -> EmbeddingTable:
    """Unit-norm Gaussian class vectors from a seeded generator.

    If names is omitted, placeholder names (background, class_01, ...) are
    attached.
    """
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if dim < 2:
        raise ValueError(f"need dimension >= 2, got {dim}")
    if names is None:
        names = (BACKGROUND,) + tuple(f"class_{i:02d}" for i in range(1, n_classes))
    elif len(names) != n_classes:
        raise ValueError(f"{len(names)} names for {n_classes} classes")
    rng = np.random.default_rng(seed)
    vectors = rng.standard_normal((n_classes, dim))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    return EmbeddingTable(names, vectors)


def concat_embeddings(a: EmbeddingTable, b: EmbeddingTable) -> EmbeddingTable:
    """Per-class concatenation of two tables over the same vocabulary."""
    if a.class_names != b.class_names:
        raise ValueError("tables cover different vocabularies")
    return EmbeddingTable(a.class_names, np.hstack([a.vectors, b.vectors]))


def make_split(vocab: ClassVocabulary, unseen_names: Iterable[str]) -> SplitSpec:
    """Build a SplitSpec from named unseen classes; the rest are seen."""
    unseen_names = list(unseen_names)
    if not unseen_names:
        raise ValueError("unseen class list must not be empty")
    if len(set(unseen_names)) != len(unseen_names):
        raise ValueError("duplicate names in unseen class list")
    unseen = set()
    for name in unseen_names:
        if name not in vocab:
            raise ValueError(f"unknown class name {name!r}")
        if name == BACKGROUND:
            raise ValueError("background cannot be named unseen")
        unseen.add(vocab.index(name))
    seen = frozenset(range(len(vocab))) - unseen
    return SplitSpec(seen=seen, unseen=frozenset(unseen), n_classes=len(vocab))
