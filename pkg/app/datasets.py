# app/datasets.py
"""
On-disk inputs and outputs:

- images: PNG or binary PPM, RGB, presented as float 0-255 H x W x 3
- fixation datasets: <root>/images/<id>.png and <root>/fixations/<id>.csv ("x,y", normalized)
- feature directories: <dir>/<image_id>.<tap>.vlmt
"""
from __future__ import annotations

import hashlib
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

from app import container
from app.errors import DataError
from app.saliency import FixationSet

logger = logging.getLogger("vlm.datasets")

IMAGE_SUFFIXES = (".png", ".ppm")
FEATURE_SUFFIX = ".vlmt"

PathLike = Union[str, Path]


# ------------------------- Images -------------------------------

def list_images(directory: PathLike) -> List[Path]:
    d = Path(directory)
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_image(path: PathLike, size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Decode to float64 H x W x 3 in 0-255; `size` is (height, width), bilinear resampled."""
    p = Path(path)
    if p.suffix.lower() not in IMAGE_SUFFIXES:
        raise DataError(f"{p.name}: only PNG and PPM images are read")
    try:
        with Image.open(p) as img:
            if img.format not in ("PNG", "PPM"):
                raise DataError(f"{p.name}: decoded as {img.format}, expected PNG or PPM")
            rgb = img.convert("RGB")
            if size is not None and rgb.size != (size[1], size[0]):
                rgb = rgb.resize((size[1], size[0]), Image.BILINEAR)
            return np.asarray(rgb, dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DataError(f"{p.name}: undecodable image ({e})") from e


def image_id(path: PathLike) -> str:
    return Path(path).stem


def sha256_file(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _affine(values: np.ndarray, top: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape)
    return np.round((values - lo) / (hi - lo) * top)


def write_rgb_png(path: PathLike, image: np.ndarray) -> None:
    """Affinely map the full value range to 0-255."""
    Image.fromarray(_affine(image, 255).astype(np.uint8)).save(path, format="PNG")


def write_u8_png(path: PathLike, image: np.ndarray) -> None:
    """Pixels already in 0-255, clipped and stored as-is."""
    Image.fromarray(np.clip(np.round(image), 0, 255).astype(np.uint8)).save(path, format="PNG")


def write_gray16_png(path: PathLike, values: np.ndarray) -> None:
    """16-bit grayscale, affinely scaled to the full range."""
    Image.fromarray(_affine(values, 65535).astype(np.uint16)).save(path, format="PNG")


def read_gray16_png(path: PathLike) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64)


# ------------------------- Fixations -------------------------------

def read_fixations(path: PathLike) -> FixationSet:
    p = Path(path)
    try:
        df = pd.read_csv(p, dtype=np.float64)
    except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"{p.name}: unreadable fixation file ({e})") from e
    if list(df.columns) != ["x", "y"]:
        raise DataError(f"{p.name}: fixation header must be 'x,y', got {','.join(map(str, df.columns))}")
    return FixationSet(image_id=p.stem, points=df[["x", "y"]].to_numpy())


def write_fixations(path: PathLike, points: np.ndarray) -> None:
    pd.DataFrame(np.asarray(points).reshape(-1, 2), columns=["x", "y"]).to_csv(
        path, index=False, lineterminator="\n", float_format="%.6f"
    )


def load_fixation_dataset(root: PathLike) -> Tuple[Dict[str, Path], Dict[str, FixationSet]]:
    """Images and fixation sets keyed by image id; only ids present in both are kept."""
    r = Path(root)
    images_dir, fix_dir = r / "images", r / "fixations"
    if not images_dir.is_dir() or not fix_dir.is_dir():
        raise DataError(f"{r}: expected images/ and fixations/ subdirectories")
    images = {image_id(p): p for p in list_images(images_dir)}
    fixations = {}
    for csv in sorted(fix_dir.glob("*.csv")):
        if csv.stem not in images:
            logger.warning("[dataset] fixations without image id=%s", csv.stem)
            continue
        fixations[csv.stem] = read_fixations(csv)
    if not fixations:
        raise DataError(f"{r}: no image has fixations")
    return {k: images[k] for k in fixations}, fixations


# ------------------------- Feature directories -------------------------------

def feature_path(directory: PathLike, image: str, tap: str) -> Path:
    return Path(directory) / f"{image}.{tap}{FEATURE_SUFFIX}"


def read_feature_dir(directory: PathLike, tap: Optional[str] = None) -> List[Tuple[str, str, np.ndarray]]:
    """(image_id, tap, H x W x D array) for every feature file, sorted by file name."""
    out = []
    for p in sorted(Path(directory).glob(f"*{FEATURE_SUFFIX}")):
        stem = p.name[: -len(FEATURE_SUFFIX)]
        image, _, layer = stem.rpartition(".")
        if not image or (tap is not None and layer != tap):
            continue
        values, _ = container.read_tensor(p)
        out.append((image, layer, values))
    return out
