#!/usr/bin/env python3
"""
Dataset plumbing: manifests, sample loading, flip augmentation, a synthetic
dataset generator and saliency-map output.

Manifest files are JSON arrays of ``{"image": ..., "mask": ..., "contour": ...}``
objects with paths relative to the manifest's directory. Images are binary
PPM (P6), masks binary PGM (P5); either may instead be an SWT1 tensor
(``.swt``).
"""

import json
import logging
import os
import pathlib
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Union

import numpy as np

from objectives import contour_from_mask
from tensor_engine import DEFAULT_DTYPE, Tensor, bilinear_resize
from tensor_io import FormatError, load_tensor, read_netpbm, save_tensor, write_netpbm

logger = logging.getLogger(__name__)

IMAGE_MEAN = 0.5
IMAGE_STD = 0.5
FLIP_MODES = ("horizontal", "vertical")
SUPERSAMPLE = 4

PathLike = Union[str, pathlib.Path]


class DataError(RuntimeError):
    """Raised for missing, unreadable or inconsistent dataset files."""


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    image: pathlib.Path
    mask: pathlib.Path
    contour: Optional[pathlib.Path] = None

    @property
    def name(self) -> str:
        return self.image.stem


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    split: str = "train"
    resolution: int = 384

    def __post_init__(self):
        seen = set()
        for entry in self.entries:
            key = entry.image.resolve()
            if key in seen:
                raise DataError(f"duplicate image in manifest: {entry.image}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def validate_files(self) -> "DatasetManifest":
        for entry in self.entries:
            for path in (entry.image, entry.mask, entry.contour):
                if path is not None and not path.exists():
                    raise DataError(f"manifest references a missing file: {path}")
        return self


def read_manifest(path: PathLike, resolution: int = 384, split: Optional[str] = None) -> DatasetManifest:
    path = pathlib.Path(path)
    if not path.exists():
        raise DataError(f"Manifest not found: {path}")
    try:
        records = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}") from e
    if not isinstance(records, list):
        raise DataError(f"manifest {path} must be a JSON array of entries")

    base = path.parent
    entries = []
    for i, record in enumerate(records):
        if not isinstance(record, dict) or "image" not in record or "mask" not in record:
            raise DataError(f"manifest {path} entry {i} needs 'image' and 'mask' fields")
        contour = record.get("contour")
        entries.append(ManifestEntry(
            base / record["image"],
            base / record["mask"],
            base / contour if contour else None,
        ))
    manifest = DatasetManifest(entries, split or path.stem, resolution)
    logger.debug(f"Read manifest {path}: {len(manifest)} entries")
    return manifest.validate_files()


def write_manifest(manifest: DatasetManifest, path: PathLike) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent

    def rel(p: pathlib.Path) -> str:
        return pathlib.Path(os.path.relpath(p, base)).as_posix()

    records = []
    for entry in manifest.entries:
        record = {"image": rel(entry.image), "mask": rel(entry.mask)}
        if entry.contour is not None:
            record["contour"] = rel(entry.contour)
        records.append(record)
    path.write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    image: Tensor     # 3 x H x W, normalised to [-1, 1]
    mask: Tensor      # 1 x H x W in [0, 1]
    contour: Tensor   # 1 x H x W in {0, 1}
    name: str = ""

    def __post_init__(self):
        spatial = {self.image.shape[1:], self.mask.shape[1:], self.contour.shape[1:]}
        if len(spatial) != 1:
            raise DataError(
                f"sample {self.name!r} fields disagree spatially: "
                f"{self.image.shape}, {self.mask.shape}, {self.contour.shape}"
            )


def read_unit_array(path: PathLike, channels: int) -> np.ndarray:
    """
    Read an image (channels=3) or mask (channels=1) file as C x H x W floats in [0, 1].

    Raises:
        DataError: when the file is missing, corrupt or has the wrong channel count
    """
    path = pathlib.Path(path)
    try:
        if path.suffix.lower() == ".swt":
            array = load_tensor(path).data.astype(np.float64)
            if array.shape[0] != 1:
                raise DataError(f"{path}: expected a single-item SWT1 tensor, got {array.shape}")
            array = array[0]
        else:
            pixels, maxval = read_netpbm(path)
            array = pixels.astype(np.float64) / maxval
            array = array[None] if array.ndim == 2 else array.transpose(2, 0, 1)
    except (FormatError, OSError) as e:
        raise DataError(f"cannot read {path}: {e}") from e

    if array.shape[0] == 1 and channels == 3:
        array = np.repeat(array, 3, axis=0)
    if array.shape[0] != channels:
        raise DataError(f"{path}: expected {channels} channel(s), got {array.shape[0]}")
    if array.min() < 0.0 or array.max() > 1.0:
        raise DataError(f"{path}: values outside [0, 1] ({array.min():.3f}..{array.max():.3f})")
    return array


def _resize(array: np.ndarray, resolution: int) -> np.ndarray:
    if array.shape[1:] == (resolution, resolution):
        return array
    resized = bilinear_resize(Tensor(array[None], dtype=np.float64), resolution, resolution)
    return np.clip(resized.data[0], 0.0, 1.0)


def load_sample(entry: ManifestEntry, target_resolution: int) -> Sample:
    """Load, scale to [0, 1], resize, derive the contour if needed and normalise the image."""
    if target_resolution < 1:
        raise ValueError(f"target resolution must be positive, got {target_resolution}")
    image = _resize(read_unit_array(entry.image, 3), target_resolution)
    mask = _resize(read_unit_array(entry.mask, 1), target_resolution)
    if entry.contour is not None:
        contour = (_resize(read_unit_array(entry.contour, 1), target_resolution) >= 0.5).astype(np.float64)
    else:
        contour = contour_from_mask(mask).data
    return Sample(
        Tensor((image - IMAGE_MEAN) / IMAGE_STD, dtype=DEFAULT_DTYPE),
        Tensor(mask, dtype=DEFAULT_DTYPE),
        Tensor(contour, dtype=DEFAULT_DTYPE),
        entry.name,
    )


def load_all(manifest: DatasetManifest, resolution: Optional[int] = None) -> List[Sample]:
    resolution = resolution or manifest.resolution
    samples = [load_sample(entry, resolution) for entry in manifest]
    logger.info(f"Loaded {len(samples)} samples from split '{manifest.split}' at {resolution}x{resolution}")
    return samples


def _flip_axis(mode: str) -> int:
    if mode not in FLIP_MODES:
        raise ValueError(f"flip mode must be one of {FLIP_MODES}, got {mode!r}")
    return -1 if mode == "horizontal" else -2


def flip_augment(sample: Sample, mode: str) -> Sample:
    axis = _flip_axis(mode)
    return Sample(
        Tensor(np.flip(sample.image.data, axis=axis)),
        Tensor(np.flip(sample.mask.data, axis=axis)),
        Tensor(np.flip(sample.contour.data, axis=axis)),
        sample.name,
    )


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    images: Tensor
    masks: Tensor
    contours: Tensor
    names: List[str] = field(default_factory=list)


def shuffled_indices(count: int, seed: int, epoch: int = 0) -> np.ndarray:
    """Reproducible permutation for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(count)


def iter_batches(
    samples: Sequence[Sample],
    batch_size: int,
    seed: Optional[int] = None,
    epoch: int = 0,
) -> Iterator[Batch]:
    """Stack samples into N x C x H x W batches; file order unless a seed is given."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = np.arange(len(samples)) if seed is None else shuffled_indices(len(samples), seed, epoch)
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        yield Batch(
            Tensor(np.stack([s.image.data for s in chunk])),
            Tensor(np.stack([s.mask.data for s in chunk])),
            Tensor(np.stack([s.contour.data for s in chunk])),
            [s.name for s in chunk],
        )


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------

def _write_unit_array(array: np.ndarray, path: pathlib.Path) -> None:
    if path.suffix.lower() == ".swt":
        save_tensor(array[None].astype(np.float32), path)
    elif array.shape[0] == 3:
        write_netpbm(path, np.round(array.transpose(1, 2, 0) * 255.0))
    else:
        write_netpbm(path, np.round(array[0] * 255.0))


def expand_with_flips(manifest: DatasetManifest, out_dir: PathLike) -> DatasetManifest:
    """Materialise horizontal and vertical flips: N entries become 3N (original, h, v)."""
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries: List[ManifestEntry] = []
    for entry in manifest:
        entries.append(entry)
        for mode, tag in (("horizontal", "h"), ("vertical", "v")):
            axis = _flip_axis(mode)
            flipped = []
            for source, channels in ((entry.image, 3), (entry.mask, 1), (entry.contour, 1)):
                if source is None:
                    flipped.append(None)
                    continue
                target = out_dir / f"{source.stem}_{tag}{source.suffix}"
                _write_unit_array(np.flip(read_unit_array(source, channels), axis=axis), target)
                flipped.append(target)
            entries.append(ManifestEntry(*flipped))
    logger.info(f"Expanded {len(manifest)} entries to {len(entries)} with flips")
    return DatasetManifest(entries, manifest.split, manifest.resolution)


def write_saliency(
    saliency: Union[Tensor, np.ndarray],
    path: PathLike,
    logits: bool = False,
    swt_path: Optional[PathLike] = None,
) -> np.ndarray:
    """
    Write a saliency map as an 8-bit PGM (value = round(255 * p)).

    Returns:
        np.ndarray: the written 8-bit pixels
    """
    array = np.asarray(saliency.data if isinstance(saliency, Tensor) else saliency, dtype=np.float64)
    array = np.squeeze(array)
    if array.ndim != 2:
        raise ValueError(f"saliency map must be a single 2-D plane, got shape {array.shape}")
    if logits:
        array = 0.5 * (1.0 + np.tanh(0.5 * array))
    probabilities = np.clip(array, 0.0, 1.0)
    pixels = np.round(probabilities * 255.0).astype(np.uint8)
    write_netpbm(path, pixels)
    if swt_path is not None:
        save_tensor(probabilities[None, None], swt_path)
    return pixels


def read_prediction(path: PathLike) -> np.ndarray:
    """A saliency map as H x W floats in [0, 1]."""
    return read_unit_array(path, 1)[0]


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def _texture(rng: np.random.Generator, resolution: int) -> np.ndarray:
    ys, xs = np.mgrid[0:resolution, 0:resolution] / resolution
    base = rng.uniform(0.15, 0.85, size=3)
    image = np.empty((3, resolution, resolution))
    for c in range(3):
        fy, fx = rng.uniform(1.0, 6.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = 0.12 * np.sin(2 * np.pi * (fy * ys + fx * xs) + phase)
        image[c] = base[c] + wave + rng.normal(0.0, 0.03, size=(resolution, resolution))
    return np.clip(image, 0.0, 1.0)


def _shape_inside(rng: np.random.Generator, resolution: int) -> np.ndarray:
    """Boolean supersampled footprint of one random ellipse or rotated rectangle."""
    size = resolution * SUPERSAMPLE
    coords = (np.arange(size) + 0.5) / SUPERSAMPLE
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    cy, cx = rng.uniform(0.25, 0.75, size=2) * resolution
    ry, rx = rng.uniform(0.1, 0.3, size=2) * resolution
    angle = rng.uniform(0, np.pi)
    u = (xs - cx) * np.cos(angle) + (ys - cy) * np.sin(angle)
    v = -(xs - cx) * np.sin(angle) + (ys - cy) * np.cos(angle)
    if rng.random() < 0.5:
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    return (np.abs(u) <= rx) & (np.abs(v) <= ry)


def _coverage(inside: np.ndarray, resolution: int) -> np.ndarray:
    return inside.reshape(resolution, SUPERSAMPLE, resolution, SUPERSAMPLE).mean(axis=(1, 3))


def synth_sample(rng: np.random.Generator, resolution: int):
    """(image 3 x R x R, mask R x R) with 1-3 anti-aliased shapes and a binary mask."""
    while True:
        image = _texture(rng, resolution)
        union = np.zeros((resolution * SUPERSAMPLE,) * 2, dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            inside = _shape_inside(rng, resolution)
            coverage = _coverage(inside, resolution)
            color = rng.uniform(0.0, 1.0, size=3)
            image = image * (1.0 - coverage) + color[:, None, None] * coverage
            union |= inside
        mask = (_coverage(union, resolution) >= 0.5).astype(np.float64)
        if mask.any():
            return image, mask


def synth_dataset(seed: int, count: int, resolution: int, out_dir: PathLike) -> DatasetManifest:
    """
    Generate ``count`` synthetic samples under ``out_dir`` and write its manifest.json.

    Output is byte-identical for equal (seed, count, resolution).
    """
    if count < 1:
        raise ValueError(f"synthetic dataset needs count >= 1, got {count}")
    if resolution < 8:
        raise ValueError(f"synthetic resolution must be >= 8, got {resolution}")
    out_dir = pathlib.Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    entries = []
    for i in range(count):
        image, mask = synth_sample(rng, resolution)
        image_path = out_dir / "images" / f"synth_{i:04d}.ppm"
        mask_path = out_dir / "masks" / f"synth_{i:04d}.pgm"
        write_netpbm(image_path, np.round(image.transpose(1, 2, 0) * 255.0))
        write_netpbm(mask_path, mask * 255.0)
        entries.append(ManifestEntry(image_path, mask_path))
        logger.debug(f"Generated {image_path.name} ({int(mask.sum())} foreground pixels)")

    manifest = DatasetManifest(entries, "synth", resolution)
    write_manifest(manifest, out_dir / "manifest.json")
    logger.info(f"Generated {count} synthetic samples at {resolution}x{resolution} in {out_dir}")
    return manifest
