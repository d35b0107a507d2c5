# app/synthetic.py
"""Deterministic desk-scale fixtures: toy CNNs, a smooth-texture corpus and a fixation dataset."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from scipy import ndimage

from app import cnn, datasets, seeding
from app.errors import UsageError
from app.models import CnnSpec

logger = logging.getLogger("vlm.synthetic")

IMAGE_SIZE = 32
CORPUS_SIZE = 64
FIXATION_IMAGES = 16
FIXATIONS_PER_IMAGE = 40


def toy_cnn_spec(variant: str = "3conv", size: int = IMAGE_SIZE) -> CnnSpec:
    """3conv: conv-relu-pool x2 then conv3. 2conv: conv1-relu-conv2, no pooling."""
    if variant == "2conv":
        layers = [
            {"kind": "conv", "name": "conv1", "out_channels": 6, "kernel_h": 3, "kernel_w": 3, "stride": 1, "pad": 1},
            {"kind": "relu", "name": "relu1"},
            {"kind": "conv", "name": "conv2", "out_channels": 8, "kernel_h": 3, "kernel_w": 3, "stride": 1, "pad": 1},
        ]
        taps = ["conv1", "conv2"]
    elif variant == "3conv":
        layers = [
            {"kind": "conv", "name": "conv1", "out_channels": 8, "kernel_h": 3, "kernel_w": 3, "stride": 1, "pad": 1},
            {"kind": "relu", "name": "relu1"},
            {"kind": "maxpool", "name": "pool1", "kernel": 2, "stride": 2},
            {"kind": "conv", "name": "conv2", "out_channels": 12, "kernel_h": 3, "kernel_w": 3, "stride": 1, "pad": 1},
            {"kind": "relu", "name": "relu2"},
            {"kind": "maxpool", "name": "pool2", "kernel": 2, "stride": 2},
            {"kind": "conv", "name": "conv3", "out_channels": 16, "kernel_h": 3, "kernel_w": 3, "stride": 1, "pad": 1},
        ]
        taps = ["conv1", "conv2", "conv3"]
    else:
        raise UsageError(f"unknown toy variant {variant!r}")
    return CnnSpec.model_validate({"layers": layers, "taps": taps, "input_size": (size, size, 3)})


def toy_cnn(variant: str = "3conv", seed: int = 0, size: int = IMAGE_SIZE) -> cnn.CnnModel:
    return cnn.init_random(toy_cnn_spec(variant, size), seeding.stream(seed, f"toy-cnn.{variant}"))


# ------------------------- Images -------------------------------

def smooth_texture(rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """Low-frequency sinusoids plus blurred noise, float 0-255."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((size, size, 3))
    base = rng.uniform(60, 190, size=3)
    for c in range(3):
        field = np.zeros((size, size))
        for _ in range(3):
            fy, fx = rng.uniform(0.3, 2.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            field += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        field += ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=3.0) * 4.0
        img[..., c] = base[c] + 20.0 * field
    return np.clip(img, 0, 255)


def insert_patch(rng: np.random.Generator, image: np.ndarray) -> Tuple[np.ndarray, Tuple[float, float], float]:
    """Irregular blob of pixel noise; returns the image, its center (x, y) normalized, and radius."""
    size = image.shape[0]
    radius = size * rng.uniform(0.10, 0.16)
    cx, cy = rng.uniform(0.2, 0.8, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.hypot((xx + 0.5) / size - cx, (yy + 0.5) / size - cy) * size
    wobble = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=2.0) * radius * 0.8
    mask = dist < radius + wobble
    out = image.copy()
    out[mask] = rng.uniform(0, 255, size=(int(mask.sum()), 3))
    return out, (float(cx), float(cy)), float(radius / size)


def draw_fixations(
    rng: np.random.Generator,
    center: Tuple[float, float],
    radius: float,
    count: int = FIXATIONS_PER_IMAGE,
    patch_share: float = 0.7,
) -> np.ndarray:
    """Mixture: around the patch, plus a center-biased component."""
    n_patch = int(round(count * patch_share))
    near = np.asarray(center) + rng.standard_normal((n_patch, 2)) * radius * 0.6
    central = 0.5 + rng.standard_normal((count - n_patch, 2)) * 0.15
    return np.clip(np.concatenate([near, central], axis=0), 0.0, 1.0)


def corpus_images(seed: int, count: int = CORPUS_SIZE, size: int = IMAGE_SIZE) -> List[np.ndarray]:
    rng = seeding.stream(seed, "synthetic.corpus")
    return [np.round(smooth_texture(rng, size)) for _ in range(count)]


@dataclass(frozen=True)
class FixationSample:
    image_id: str
    image: np.ndarray
    points: np.ndarray
    center: Tuple[float, float]
    radius: float


def fixation_samples(seed: int, count: int = FIXATION_IMAGES, size: int = IMAGE_SIZE) -> List[FixationSample]:
    rng = seeding.stream(seed, "synthetic.fixations")
    out = []
    for i in range(count):
        image, center, radius = insert_patch(rng, smooth_texture(rng, size))
        out.append(
            FixationSample(
                image_id=f"img{i:03d}",
                image=np.round(image),
                points=draw_fixations(rng, center, radius),
                center=center,
                radius=radius,
            )
        )
    return out


# ------------------------- Writers -------------------------------

def write_all(out: Union[str, Path], seed: int) -> Dict[str, Path]:
    """Toy CNN files, <out>/corpus/<id>.png and <out>/fixations-data/{images,fixations}/."""
    root = Path(out)
    corpus_dir = root / "corpus"
    fix_root = root / "fixations-data"
    for d in (corpus_dir, fix_root / "images", fix_root / "fixations"):
        d.mkdir(parents=True, exist_ok=True)

    paths = {"cnn": root / "toy-cnn.vlmw", "cnn2": root / "toy-cnn-2conv.vlmw", "corpus": corpus_dir, "fixations": fix_root}
    cnn.save_model(toy_cnn("3conv", seed), paths["cnn"])
    cnn.save_model(toy_cnn("2conv", seed), paths["cnn2"])

    for i, image in enumerate(corpus_images(seed)):
        datasets.write_u8_png(corpus_dir / f"tex{i:03d}.png", image)
    for sample in fixation_samples(seed):
        datasets.write_u8_png(fix_root / "images" / f"{sample.image_id}.png", sample.image)
        datasets.write_fixations(fix_root / "fixations" / f"{sample.image_id}.csv", sample.points)
    logger.info("[synth] out=%s corpus=%d fixation_images=%d", root, CORPUS_SIZE, FIXATION_IMAGES)
    return paths
