# app/saliency.py
"""
Saliency from an unnaturalness map (sqrt, bilinear resize, Gaussian blur) and the
shuffled-AUC benchmark with negatives pooled from other images' fixations.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.stats import binomtest, rankdata

from app import seeding
from app.errors import DataError, ShapeError
from app.metrics import IMAGES_PROCESSED_TOTAL
from app.tensor import Tensor
from app.vlm import UnnaturalnessMap

logger = logging.getLogger("vlm.saliency")

MapLike = Union[UnnaturalnessMap, Tensor, np.ndarray]


def _array(m: MapLike) -> np.ndarray:
    if isinstance(m, UnnaturalnessMap):
        m = m.values
    if isinstance(m, Tensor):
        return m.numpy().astype(np.float64)
    return np.asarray(m, dtype=np.float64)


# ------------------------- Map processing -------------------------------

def gaussian_kernel(sigma_px: float) -> np.ndarray:
    """Sampled Gaussian truncated at radius ceil(3 sigma), normalized to sum 1."""
    radius = int(math.ceil(3.0 * sigma_px))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma_px * sigma_px))
    return k / k.sum()


def gaussian_blur(values: np.ndarray, sigma_px: float) -> np.ndarray:
    """Separable blur with half-sample symmetric borders; sigma 0 returns the input unchanged."""
    if sigma_px < 0:
        raise ShapeError(f"blur sigma must be >= 0, got {sigma_px}")
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeError(f"gaussian_blur expects a 2-D map, got {values.shape}")
    if sigma_px == 0:
        return values.copy()
    k = gaussian_kernel(sigma_px)
    out = ndimage.correlate1d(values.astype(np.float64), k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def resize_bilinear(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with pixel-center alignment (align_corners=False), edges clamped."""
    in_h, in_w = values.shape
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(np.asarray(values, dtype=np.float64), [yy, xx], order=1, mode="nearest")


def saliency_from_map(u: MapLike, out_h: int, out_w: int, sigma_rel: float) -> np.ndarray:
    """sqrt -> resize to (out_h, out_w) -> blur with sigma = sigma_rel * out_w pixels."""
    values = _array(u)
    if values.ndim != 2 or values.size == 0:
        raise DataError(f"saliency_from_map: empty or non-2-D map {values.shape}")
    if sigma_rel < 0:
        raise ShapeError(f"sigma_rel must be >= 0, got {sigma_rel}")
    root = np.sqrt(np.maximum(values, 0.0))
    resized = resize_bilinear(root, out_h, out_w)
    return np.maximum(gaussian_blur(resized, sigma_rel * out_w), 0.0)


# ------------------------- Fixations -------------------------------

@dataclass(frozen=True)
class FixationSet:
    image_id: str
    points: np.ndarray  # N x 2, (x, y) in [0, 1]

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if pts.size and (pts.min() < 0.0 or pts.max() > 1.0):
            raise DataError(f"fixations for {self.image_id!r} fall outside [0, 1]")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def sample_at_fixations(sal: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Nearest-pixel values: column min(floor(x W), W - 1), row likewise."""
    h, w = sal.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    cols = np.minimum(np.floor(pts[:, 0] * w).astype(int), w - 1)
    rows = np.minimum(np.floor(pts[:, 1] * h).astype(int), h - 1)
    return sal[rows, cols]


def auc_from_scores(pos: np.ndarray, neg: np.ndarray) -> float:
    """Mann-Whitney U / (|P| |N|); ties count one half."""
    n_p, n_n = len(pos), len(neg)
    if n_p == 0 or n_n == 0:
        raise DataError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:n_p].sum() - n_p * (n_p + 1) / 2.0
    return float(u / (n_p * n_n))


def shuffled_auc(sal: np.ndarray, positives: FixationSet, negatives: FixationSet) -> float:
    if len(positives) == 0 or len(negatives) == 0:
        raise DataError("shuffled_auc: empty fixation set")
    return auc_from_scores(sample_at_fixations(sal, positives.points), sample_at_fixations(sal, negatives.points))


def build_negative_set(all_fixations: Mapping[str, FixationSet], exclude: str, cap: int, seed: int) -> FixationSet:
    """Every other image's fixations in image-id order, subsampled to `cap` without replacement."""
    pool = [all_fixations[k].points for k in sorted(all_fixations) if k != exclude and len(all_fixations[k])]
    if not pool:
        raise DataError(f"no fixations outside image {exclude!r} to draw negatives from")
    points = np.concatenate(pool, axis=0)
    if points.shape[0] > cap:
        rng = seeding.stream(seed, f"negatives.{exclude}")
        idx = np.sort(rng.choice(points.shape[0], size=cap, replace=False))
        points = points[idx]
    return FixationSet(image_id=f"not:{exclude}", points=points)


# ------------------------- Baselines -------------------------------

def uniform_map(h: int, w: int) -> np.ndarray:
    return np.ones((h, w))


def center_gaussian_map(h: int, w: int, sigma_rel: float = 0.25) -> np.ndarray:
    """Isotropic Gaussian at the image center; sigma relative to each side."""
    ys = (np.arange(h) + 0.5) / h - 0.5
    xs = (np.arange(w) + 0.5) / w - 0.5
    return np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2.0 * sigma_rel ** 2))


def fixation_density_map(points: np.ndarray, h: int, w: int, sigma_px: float) -> np.ndarray:
    """Blurred histogram of fixation points."""
    hist = np.zeros((h, w))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    cols = np.minimum(np.floor(pts[:, 0] * w).astype(int), w - 1)
    rows = np.minimum(np.floor(pts[:, 1] * h).astype(int), h - 1)
    np.add.at(hist, (rows, cols), 1.0)
    return gaussian_blur(hist, sigma_px)


# ------------------------- Benchmark -------------------------------

def evaluate_dataset(
    saliency_for: Callable[[str], np.ndarray],
    fixations: Mapping[str, FixationSet],
    cap: int,
    seed: int,
    jobs: int = 1,
    command: str = "eval-auc",
) -> List[Tuple[str, float]]:
    """Shuffled AUC per image, computed concurrently, returned in image-id order."""
    ids = sorted(fixations)

    def one(image_id: str) -> Tuple[str, float]:
        sal = saliency_for(image_id)
        negatives = build_negative_set(fixations, image_id, cap, seed)
        score = shuffled_auc(sal, fixations[image_id], negatives)
        IMAGES_PROCESSED_TOTAL.labels(command=command, status="ok").inc()
        return image_id, score

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(one, ids))
    logger.info("[eval] images=%d mean_auc=%.4f", len(results), float(np.mean([s for _, s in results])) if results else float("nan"))
    return results


def sign_test(scores: Sequence[float], reference: float = 0.5) -> float:
    """One-sided p-value that scores exceed `reference` more often than chance (ties dropped)."""
    arr = np.asarray(scores, dtype=np.float64)
    wins = int(np.sum(arr > reference))
    n = int(np.sum(arr != reference))
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)


def summarize(results: Sequence[Tuple[str, float]]) -> Dict[str, float]:
    scores = [s for _, s in results]
    return {"mean": float(np.mean(scores)) if scores else float("nan"), "images": float(len(scores))}
