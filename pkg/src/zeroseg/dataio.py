"""Seeded synthetic scene generator and bit-exact dataset serialization.

Scenes are painted from class embeddings: every class gets the color
``0.5 + M @ phi(class)`` for a fixed random mixing matrix M, so pixel
appearance is an affine function of the class embedding.  That makes
zero-shot transfer well-posed by construction: a model that learns the
color-to-embedding relation on seen classes can extrapolate it to unseen
ones.

On disk a dataset is a directory with ``manifest.json`` plus raw
little-endian ``img_#####.f32`` (float32, H*W*3) and ``mask_#####.u16``
(uint16, H*W) files, all checksummed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from ._fileio import atomic_write_bytes, atomic_write_json, sha256_hex
from .embeddings import ClassVocabulary, EmbeddingTable, SplitSpec

__all__ = [
    "SceneConfig",
    "Sample",
    "Dataset",
    "MaskHiddenError",
    "ChecksumError",
    "make_mixing_matrix",
    "class_colors",
    "render_scene",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
]

SHAPE_KINDS = ("rectangle", "ellipse")

# Noise-free colors are kept at least this far from the [0, 1] clamp.
_COLOR_MARGIN = 0.05


class MaskHiddenError(RuntimeError):
    """Training-facing code asked for masks of an unlabeled dataset."""


class ChecksumError(ValueError):
    """A stored dataset file does not match its recorded checksum."""


@dataclass(frozen=True)
class SceneConfig:
    height: int = 96
    width: int = 96
    channels: int = 3
    objects_min: int = 2
    objects_max: int = 4
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    noise_sigma: float = 0.05
    mixing_seed: int = 0
    scene_seed: int = 0
    allow_seen_in_target: bool = True

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("canvas must be at least 8 x 8")
        if self.channels != 3:
            raise ValueError("only 3-channel scenes are supported")
        if self.objects_min < 1 or self.objects_max < self.objects_min:
            raise ValueError("objects_per_image range must satisfy 1 <= min <= max")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if not self.shape_kinds or any(k not in SHAPE_KINDS for k in self.shape_kinds):
            raise ValueError(f"shape kinds must be drawn from {SHAPE_KINDS}")


@dataclass
class Sample:
    """One scene: float32 image in [0, 1] and a uint16 class-id mask."""

    image: np.ndarray
    mask: np.ndarray


class Dataset:
    """An in-memory dataset plus the manifest metadata that describes it.

    Target-domain datasets hide their masks from the training-facing
    accessor; evaluation code uses evaluation_mask instead.
    """

    def __init__(
        self,
        role: str,
        samples: Sequence[Sample],
        vocab: ClassVocabulary,
        split: SplitSpec,
        config: SceneConfig,
    ):
        if role not in ("source", "target"):
            raise ValueError(f"role must be source or target, got {role!r}")
        self.role = role
        self.samples = list(samples)
        self.vocab = vocab
        self.split = split
        self.config = config
        self.masks_visible = role == "source"

    def __len__(self) -> int:
        return len(self.samples)

    def image(self, i: int) -> np.ndarray:
        return self.samples[i].image

    def training_mask(self, i: int) -> np.ndarray:
        if not self.masks_visible:
            raise MaskHiddenError(
                f"{self.role} dataset masks are evaluation-only and hidden from training"
            )
        return self.samples[i].mask

    def evaluation_mask(self, i: int) -> np.ndarray:
        return self.samples[i].mask


def make_mixing_matrix(table: EmbeddingTable, mixing_seed: int) -> np.ndarray:
    """Fixed 3 x d color-mixing matrix for a dataset.

    Entries start i.i.d. N(0, 1/d); the matrix is then shrunk, if needed,
    so every noise-free class color stays inside the [0, 1] gamut.  Without
    that the clamp would break the affine color model the generator
    promises.
    """
    d = table.dim
    rng = np.random.default_rng(mixing_seed)
    mixing = rng.normal(0.0, 1.0 / np.sqrt(d), size=(3, d))
    spread = np.abs(table.vectors @ mixing.T).max()
    limit = 0.5 - _COLOR_MARGIN
    if spread > limit:
        mixing *= limit / spread
    return mixing


def class_colors(table: EmbeddingTable, mixing: np.ndarray) -> np.ndarray:
    """Noise-free color of every class: 0.5 + mixing @ phi(class)."""
    return 0.5 + table.vectors @ mixing.T


def _paint_shape(mask: np.ndarray, cls: int, config: SceneConfig, rng) -> None:
    h, w = mask.shape
    kind = config.shape_kinds[int(rng.integers(len(config.shape_kinds)))]
    cy = rng.uniform(0.15, 0.85) * h
    cx = rng.uniform(0.15, 0.85) * w
    ry = max(2.0, rng.uniform(0.08, 0.28) * min(h, w))
    rx = max(2.0, rng.uniform(0.08, 0.28) * min(h, w))
    yy = np.arange(h)[:, None]
    xx = np.arange(w)[None, :]
    if kind == "rectangle":
        inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    else:
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    mask[inside] = cls


def render_scene(
    config: SceneConfig,
    classes: Sequence[int],
    mixing: np.ndarray,
    table: EmbeddingTable,
    rng: np.random.Generator | None = None,
) -> Sample:
    """Paint the given classes in order (later shapes overdraw earlier).

    The mask records the topmost class per pixel; the image is the class
    color field plus optional per-pixel Gaussian noise, clamped to [0, 1].
    """
    if not classes:
        raise ValueError("render_scene needs at least one class")
    n = len(table)
    for cls in classes:
        if not 0 <= cls < n:
            raise ValueError(f"class index {cls} outside vocabulary of size {n}")
    if rng is None:
        rng = np.random.default_rng(config.scene_seed)
    mask = np.zeros((config.height, config.width), dtype=np.uint16)
    for cls in classes:
        _paint_shape(mask, int(cls), config, rng)
    colors = class_colors(table, mixing)
    image = colors[mask.astype(np.intp)]
    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image=image, mask=mask)


def _draw_classes(
    role: str, split: SplitSpec, config: SceneConfig, rng: np.random.Generator
) -> list[int]:
    count = int(rng.integers(config.objects_min, config.objects_max + 1))
    if role == "source":
        pool = split.seen_objects
        return [int(c) for c in rng.choice(pool, size=count)]
    pool = split.unseen_sorted
    if config.allow_seen_in_target:
        pool = tuple(sorted(split.seen_objects + split.unseen_sorted))
    classes = [int(c) for c in rng.choice(pool, size=count)]
    # The last shape is painted on top and can never be fully overdrawn,
    # so forcing it unseen guarantees every target mask shows one.
    classes[-1] = int(rng.choice(split.unseen_sorted))
    return classes


def generate_dataset(
    vocab: ClassVocabulary,
    table: EmbeddingTable,
    split: SplitSpec,
    n_source: int,
    n_target: int,
    config: SceneConfig,
) -> tuple[Dataset, Dataset]:
    """Render a labeled source set and an unlabeled target set.

    Every byte is determined by (mixing_seed, scene_seed, config): each
    sample uses its own generator derived from the scene seed, its role,
    and its index.
    """
    if n_source < 1 or n_target < 1:
        raise ValueError("need at least one source and one target sample")
    if not split.unseen:
        raise ValueError("split has no unseen classes")
    if split.n_classes != len(vocab) or len(table) != len(vocab):
        raise ValueError("vocabulary, table, and split sizes disagree")
    mixing = make_mixing_matrix(table, config.mixing_seed)
    datasets = []
    for role_id, (role, count) in enumerate((("source", n_source), ("target", n_target))):
        samples = []
        for i in range(count):
            rng = np.random.default_rng([config.scene_seed, role_id, i])
            classes = _draw_classes(role, split, config, rng)
            samples.append(render_scene(config, classes, mixing, table, rng))
        datasets.append(Dataset(role, samples, vocab, split, config))
    return datasets[0], datasets[1]


def save_dataset(dataset: Dataset, directory: str | Path) -> None:
    """Write manifest.json plus raw image/mask files with checksums."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(dataset.samples):
        img_name = f"img_{i:05d}.f32"
        mask_name = f"mask_{i:05d}.u16"
        img_bytes = sample.image.astype("<f4").tobytes()
        mask_bytes = sample.mask.astype("<u2").tobytes()
        atomic_write_bytes(directory / img_name, img_bytes)
        atomic_write_bytes(directory / mask_name, mask_bytes)
        entries.append(
            {
                "image": img_name,
                "image_sha256": sha256_hex(img_bytes),
                "mask": mask_name,
                "mask_sha256": sha256_hex(mask_bytes),
            }
        )
    manifest = {
        "role": dataset.role,
        "masks_visible": dataset.masks_visible,
        "n_samples": len(dataset.samples),
        "class_names": list(dataset.vocab.names),
        "unseen": sorted(dataset.vocab.names[i] for i in dataset.split.unseen),
        "config": asdict(dataset.config),
        "samples": entries,
    }
    atomic_write_json(directory / "manifest.json", manifest)


def _read_checked(directory: Path, name: str, expected_sha: str) -> bytes:
    path = directory / name
    if not path.exists():
        raise ChecksumError(f"missing dataset file {name}")
    data = path.read_bytes()
    if sha256_hex(data) != expected_sha:
        raise ChecksumError(f"checksum mismatch in {name}")
    return data


def load_dataset(directory: str | Path) -> Dataset:
    """Reconstruct a dataset; every file is verified against its checksum."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    cfg = manifest["config"]
    cfg["shape_kinds"] = tuple(cfg["shape_kinds"])
    config = SceneConfig(**cfg)
    vocab = ClassVocabulary(manifest["class_names"])
    from .embeddings import make_split

    split = make_split(vocab, manifest["unseen"])
    h, w = config.height, config.width
    samples = []
    for entry in manifest["samples"]:
        img = np.frombuffer(
            _read_checked(directory, entry["image"], entry["image_sha256"]), dtype="<f4"
        ).reshape(h, w, 3)
        mask = np.frombuffer(
            _read_checked(directory, entry["mask"], entry["mask_sha256"]), dtype="<u2"
        ).reshape(h, w)
        samples.append(Sample(image=img.copy(), mask=mask.copy()))
    if len(samples) != manifest["n_samples"]:
        raise ChecksumError("manifest sample count disagrees with file list")
    return Dataset(manifest["role"], samples, vocab, split, config)
