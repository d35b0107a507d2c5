# app/reconstruct.py
"""
Image reconstruction from a CNN feature by momentum gradient descent on pixels:

    minimize ||phi(target) - phi(x)||^2 + lambda_r * u(x)

where u is the lambda-weighted VLM image unnaturalness over the configured layers.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from app import cnn, container, seeding
from app import tensor as T
from app.config import DIVERGENCE_LIMIT
from app.errors import DataError, DivergenceError, EmptyCorpusError, NonFiniteError, ShapeError, UsageError
from app.metrics import RECONSTRUCT_ITERATIONS_TOTAL
from app.models import ReconstructionConfig
from app.tensor import Tape, Tensor
from app.vlm import VlmLayerModel, default_lambdas, image_unnaturalness, layer_unnaturalness, unnaturalness_map

logger = logging.getLogger("vlm.reconstruct")

STD_FLOOR = 1e-6
HISTORY_COLUMNS = ["iter", "objective", "feature_term", "regularizer_term"]


# ------------------------- RGB statistics -------------------------------

@dataclass(frozen=True)
class RgbStats:
    mean: np.ndarray  # (3,)
    std: np.ndarray   # (3,)


def fit_rgb_stats(corpus: Iterable[np.ndarray]) -> RgbStats:
    """Per-channel mean and population std over every pixel of every image (streamed)."""
    count = 0
    mean = np.zeros(3)
    m2 = np.zeros(3)
    for image in corpus:
        px = np.asarray(image, dtype=np.float64).reshape(-1, 3)
        n_b = px.shape[0]
        if n_b == 0:
            continue
        mean_b = px.mean(axis=0)
        m2_b = ((px - mean_b) ** 2).sum(axis=0)
        n = count + n_b
        delta = mean_b - mean
        mean = mean + delta * (n_b / n)
        m2 = m2 + m2_b + delta ** 2 * (count * n_b / n)
        count = n
    if count == 0:
        raise EmptyCorpusError("fit_rgb_stats: corpus is empty")

    std = np.sqrt(m2 / count)
    flat = std < STD_FLOOR
    if flat.any():
        logger.warning("[rgb] zero-variance channels=%s std floor=%g", np.flatnonzero(flat).tolist(), STD_FLOOR)
        std = np.where(flat, STD_FLOOR, std)
    return RgbStats(mean=mean, std=std)


# ------------------------- Objective -------------------------------

@dataclass(frozen=True)
class ObjectiveValue:
    value: float
    feature_term: float
    regularizer_term: float
    gradient: np.ndarray


def _target_tap(model: cnn.CnnModel, cfg: ReconstructionConfig) -> str:
    tap = cfg.target_layer or model.spec.taps[-1]
    if tap not in model.spec.taps:
        raise DataError(f"target layer {tap!r} is not a tap of the CNN ({model.spec.taps})")
    return tap


def objective(
    target: np.ndarray,
    image: Union[np.ndarray, Tensor],
    model: cnn.CnnModel,
    vlm_models: Sequence[VlmLayerModel],
    cfg: ReconstructionConfig,
    post_relu: bool = False,
) -> ObjectiveValue:
    tap = _target_tap(model, cfg)
    expected = model.tap_shapes()[tap]
    if tuple(np.shape(target)) != expected:
        raise ShapeError(f"target feature shape {np.shape(target)} does not match tap {tap!r} {expected}")
    taps = set(model.spec.taps)
    for m in vlm_models:
        if m.layer_name not in taps:
            raise DataError(f"layer model {m.layer_name!r} has no matching CNN tap")
    lambdas = cfg.lambdas or default_lambdas([m.layer_name for m in vlm_models])

    img = Tensor(image)
    with Tape() as tape:
        tape.watch(img)
        grids = cnn.forward(model, img, post_relu=post_relu)
        diff = grids[tap].values - Tensor(target)
        feature = T.sum(diff * diff)
        if cfg.lambda_r > 0 and vlm_models:
            per_layer = {m.layer_name: layer_unnaturalness(unnaturalness_map(m, grids[m.layer_name])) for m in vlm_models}
            reg = image_unnaturalness(per_layer, lambdas) * cfg.lambda_r
        else:
            reg = T.zeros(())
        total = feature + reg
    value = total.item()
    if not np.isfinite(value):
        raise NonFiniteError(f"objective is not finite ({value})")
    (grad,) = tape.gradient(total, [img])
    return ObjectiveValue(value=value, feature_term=feature.item(), regularizer_term=reg.item(), gradient=grad)


# ------------------------- Gradient descent -------------------------------

@dataclass
class ReconstructionResult:
    image: np.ndarray
    best_iteration: int
    history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([row["objective"] for row in self.history])


def initial_image(
    model: cnn.CnnModel,
    cfg: ReconstructionConfig,
    init_image: Optional[np.ndarray] = None,
    rgb_stats: Optional[RgbStats] = None,
) -> np.ndarray:
    h, w, c = model.input_size
    if cfg.init == "from_image":
        if init_image is None:
            raise UsageError("init=from_image needs an initial image")
        if np.shape(init_image) != (h, w, c):
            raise ShapeError(f"initial image shape {np.shape(init_image)} does not match CNN input {(h, w, c)}")
        return np.array(init_image, dtype=T.get_dtype())
    if rgb_stats is None:
        raise UsageError("init=gaussian needs RGB statistics")
    rng = seeding.stream(cfg.seed, "reconstruct.init")
    noise = rng.standard_normal((h, w, c))
    return (rgb_stats.mean + rgb_stats.std * noise).astype(T.get_dtype())


def reconstruct(
    target: np.ndarray,
    model: cnn.CnnModel,
    vlm_models: Sequence[VlmLayerModel],
    cfg: ReconstructionConfig,
    init_image: Optional[np.ndarray] = None,
    rgb_stats: Optional[RgbStats] = None,
    post_relu: bool = False,
    log_every: int = 25,
) -> ReconstructionResult:
    """Momentum GD from the configured start; returns the lowest-objective iterate seen."""
    x = initial_image(model, cfg, init_image, rgb_stats)
    velocity = np.zeros_like(x)
    if cfg.lr == 0:
        logger.warning("[reconstruct] lr=0, the image will not move")

    best_value = np.inf
    result = ReconstructionResult(image=x.copy(), best_iteration=0)
    for it in range(cfg.iters):
        try:
            obj = objective(target, x, model, vlm_models, cfg, post_relu=post_relu)
        except NonFiniteError as e:
            raise DivergenceError(f"objective is not finite at iteration {it}", iteration=it) from e
        if obj.value > DIVERGENCE_LIMIT:
            raise DivergenceError(f"objective {obj.value:.3g} diverged at iteration {it}", iteration=it)
        result.history.append(
            {"iter": it, "objective": obj.value, "feature_term": obj.feature_term, "regularizer_term": obj.regularizer_term}
        )
        if obj.value < best_value:
            best_value = obj.value
            result.image = x.copy()
            result.best_iteration = it

        velocity = cfg.momentum * velocity - cfg.lr * obj.gradient
        x = x + velocity
        RECONSTRUCT_ITERATIONS_TOTAL.inc()
        if it % log_every == 0 or it == cfg.iters - 1:
            logger.info(
                "[reconstruct] iter=%d objective=%.6g feature=%.6g regularizer=%.6g",
                it, obj.value, obj.feature_term, obj.regularizer_term,
            )
    return result


# ------------------------- Output -------------------------------

def write_history(path: Union[str, Path], history: Sequence[Dict[str, float]]) -> None:
    pd.DataFrame(list(history), columns=HISTORY_COLUMNS).to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


def write_raw(path: Union[str, Path], image: np.ndarray, meta: Optional[dict] = None) -> None:
    container.write_tensor(path, image, meta)
