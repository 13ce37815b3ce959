"""Procedural multi-band images with region-structured labels.

Each image is a Voronoi partition of the pixel grid: seed points carry a
class, every pixel takes the class of its nearest seed (ties to the lower
seed index), and each class has its own spectral signature across bands.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ManifestError
from .modelio import FORMAT_VERSION, MANIFEST, atomic_write_text, dump_json, read_blob, read_manifest, write_blob


@dataclass
class Dataset:
    images: list[np.ndarray]
    labels: list[np.ndarray]
    classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)


def region_labels(seeds: np.ndarray, seed_classes: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Class of the nearest seed for every pixel (squared Euclidean distance)."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    d = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    return np.asarray(seed_classes, np.uint8)[np.argmin(d, axis=-1)]


def _layout(rng: np.random.Generator, shape, classes: int, seeds_per_class: int):
    h, w = shape
    n = classes * seeds_per_class
    flat = rng.choice(h * w, size=n, replace=False)
    seeds = np.stack([flat // w, flat % w], axis=1)
    # a seed is always nearest to itself, so the first ``classes`` seeds guarantee coverage
    seed_classes = np.concatenate([np.arange(classes), rng.integers(0, classes, n - classes)])
    return seeds, seed_classes


def make_synthetic_dataset(
    seed: int,
    count: int,
    shape: tuple[int, int, int],
    classes: int,
    seeds_per_class: int = 2,
    noise: float = 0.1,
) -> Dataset:
    h, w, bands = (int(v) for v in shape)
    if count < 1 or classes < 1 or bands < 1:
        raise ContractError("count, classes and bands must be positive")
    if classes > 256:
        raise ContractError("label maps are 8-bit; at most 256 classes")
    if classes * seeds_per_class > h * w:
        raise ContractError(f"{h}x{w} image cannot hold {classes * seeds_per_class} distinct seeds")
    rng = np.random.default_rng(seed)
    signatures = rng.uniform(-1.0, 1.0, size=(classes, bands))
    images, labels = [], []
    for _ in range(count):
        seeds, seed_classes = _layout(rng, (h, w), classes, seeds_per_class)
        lab = region_labels(seeds, seed_classes, (h, w))
        img = signatures[lab] + noise * rng.standard_normal((h, w, bands))
        images.append(img.astype(np.float32))
        labels.append(lab)
    meta = {"generator": "voronoi", "seed": int(seed), "seeds_per_class": seeds_per_class, "noise": noise}
    return Dataset(images, labels, classes, meta)


def regenerate_labels(seed: int, count: int, shape, classes: int, seeds_per_class: int = 2) -> list[np.ndarray]:
    """Replay the generator's RNG stream and return only the label maps."""
    h, w, bands = (int(v) for v in shape)
    rng = np.random.default_rng(seed)
    rng.uniform(-1.0, 1.0, size=(classes, bands))
    out = []
    for _ in range(count):
        seeds, seed_classes = _layout(rng, (h, w), classes, seeds_per_class)
        out.append(region_labels(seeds, seed_classes, (h, w)))
        rng.standard_normal((h, w, bands))
    return out


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    images = [write_blob(path, f"image{i:04d}", im, "f32") for i, im in enumerate(ds.images)]
    labels = [write_blob(path, f"label{i:04d}", lab, "u8") for i, lab in enumerate(ds.labels)]
    manifest = {"version": FORMAT_VERSION, "kind": "dataset", "classes": ds.classes, "meta": ds.meta, "images": images, "labels": labels}
    atomic_write_text(path / MANIFEST, dump_json(manifest))
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = read_manifest(path, "dataset")
    try:
        images = [read_blob(path, e) for e in manifest["images"]]
        labels = [read_blob(path, e) for e in manifest["labels"]]
        classes = int(manifest["classes"])
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed dataset manifest: {exc}") from exc
    if len(images) != len(labels):
        raise ManifestError("dataset has different numbers of images and label maps")
    for im, lab in zip(images, labels):
        if im.ndim != 3 or lab.shape != im.shape[:2]:
            raise ManifestError(f"image {im.shape} and label map {lab.shape} do not align")
    return Dataset(images, labels, classes, dict(manifest.get("meta", {})))
