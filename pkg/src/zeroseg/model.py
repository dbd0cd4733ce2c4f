"""Projection network, relation scores against class embeddings, and
per-pixel prediction.

The network is a small fully convolutional stack (two 3x3 conv+ReLU
layers and a 1x1 projection) that maps an H x W x 3 image to an
H x W x d feature field.  A pixel's logit for class y is the inner
product of its feature with the class embedding; a softmax over the full
vocabulary turns the logits into per-pixel probabilities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nm
from ._fileio import atomic_write_bytes, atomic_write_json, sha256_hex
from .embeddings import EmbeddingTable, SplitSpec
from .numerics import ParamSet, ShapeError, Tensor

__all__ = [
    "NetConfig",
    "PARAM_NAMES",
    "init_net",
    "forward",
    "relation_logits",
    "pixel_softmax",
    "predict",
    "infer_probs",
    "save_checkpoint",
    "load_checkpoint",
]

PARAM_NAMES = (
    "conv1.kernel",
    "conv1.bias",
    "conv2.kernel",
    "conv2.bias",
    "proj.kernel",
    "proj.bias",
)


@dataclass(frozen=True)
class NetConfig:
    """Three fixed layers: 3x3 conv+ReLU, 3x3 conv+ReLU, 1x1 projection."""

    output_dim: int
    hidden_channels: int = 16
    init_seed: int = 0

    def __post_init__(self):
        if self.output_dim < 1 or self.hidden_channels < 1:
            raise ValueError("output_dim and hidden_channels must be positive")


def init_net(config: NetConfig) -> ParamSet:
    """Kernels drawn at scale sqrt(2 / fan_in); biases zero."""
    rng = np.random.default_rng(config.init_seed)
    h = config.hidden_channels
    d = config.output_dim
    shapes = {
        "conv1.kernel": (3, 3, 3, h),
        "conv2.kernel": (3, 3, h, h),
        "proj.kernel": (1, 1, h, d),
    }
    tensors: dict[str, np.ndarray] = {}
    for name in PARAM_NAMES:
        if name.endswith(".kernel"):
            shape = shapes[name]
            fan_in = shape[0] * shape[1] * shape[2]
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            tensors[name] = np.zeros(shapes[name.replace(".bias", ".kernel")][-1])
    return ParamSet(tensors)


def forward(params: Mapping[str, Tensor], image: Tensor) -> Tensor:
    """Image (H, W, 3) -> feature field (H, W, d), resolution preserving.

    A batched (B, H, W, 3) stack yields a (B, H, W, d) stack.
    """
    if image.data.ndim not in (3, 4) or image.data.shape[-1] != 3:
        raise ShapeError(f"image must be (H, W, 3) or (B, H, W, 3), got {image.data.shape}")
    h1 = nm.relu(nm.conv2d(image, params["conv1.kernel"], params["conv1.bias"]))
    h2 = nm.relu(nm.conv2d(h1, params["conv2.kernel"], params["conv2.bias"]))
    return nm.conv2d(h2, params["proj.kernel"], params["proj.bias"])


def relation_logits(features: Tensor, table: EmbeddingTable) -> Tensor:
    """logits[i, j, y] = <feature(i, j), phi(y)> over the full vocabulary."""
    if features.data.shape[-1] != table.dim:
        raise ShapeError(
            f"feature dimension {features.data.shape[-1]} vs embeddings d={table.dim}"
        )
    return nm.inner_last(features, table.vectors)


def pixel_softmax(logits: Tensor) -> Tensor:
    """Per-pixel probabilities over all classes, seen and unseen alike."""
    return nm.softmax_last(logits)


def predict(probs: np.ndarray, mode: str, split: SplitSpec) -> np.ndarray:
    """Per-pixel argmax; ties go to the lowest class index.

    generalized: argmax over every class.  conventional: argmax restricted
    to unseen classes plus background.
    """
    probs = np.asarray(probs)
    if mode == "generalized":
        return probs.argmax(axis=-1)
    if mode == "conventional":
        allowed = sorted(set(split.unseen) | {0})
        sub = probs[..., allowed].argmax(axis=-1)
        return np.asarray(allowed, dtype=np.int64)[sub]
    raise ValueError(f"mode must be generalized or conventional, got {mode!r}")


def infer_probs(params: ParamSet, image: np.ndarray, table: EmbeddingTable) -> np.ndarray:
    """Tape-free forward pass from a raw image array to a probability map."""
    tensors = {name: Tensor(arr) for name, arr in params.tensors.items()}
    feats = forward(tensors, Tensor(image))
    return pixel_softmax(relation_logits(feats, table)).data


def save_checkpoint(params: ParamSet, directory: str | Path, meta: dict | None = None) -> None:
    """Raw little-endian float64 file per tensor plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in params.tensors.items():
        fname = name + ".f64"
        data = arr.astype("<f8").tobytes()
        atomic_write_bytes(directory / fname, data)
        entries[name] = {
            "file": fname,
            "shape": list(arr.shape),
            "sha256": sha256_hex(data),
        }
    manifest = {"tensors": entries, "meta": meta or {}}
    atomic_write_json(directory / "manifest.json", manifest)


def load_checkpoint(directory: str | Path) -> tuple[ParamSet, dict]:
    """Bit-exact reload of a checkpoint; returns (params, meta)."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    tensors = {}
    for name, entry in manifest["tensors"].items():
        data = (directory / entry["file"]).read_bytes()
        if sha256_hex(data) != entry["sha256"]:
            raise ValueError(f"checksum mismatch in checkpoint tensor {entry['file']}")
        tensors[name] = np.frombuffer(data, dtype="<f8").reshape(entry["shape"]).copy()
    return ParamSet(tensors), manifest.get("meta", {})
