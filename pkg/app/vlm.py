# app/vlm.py
"""
Visual language model over one CNN layer.

Four predictor stacks (two recurrent layers and a linear head) scan the preprocessed
feature grid left-to-right, right-to-left, top-to-bottom and bottom-to-top. Their weighted
squared prediction errors form the unnaturalness map; its mean is the layer score and a
lambda-weighted sum over layers is the image score. Training is momentum SGD with BPTT
through the tape.
"""
from __future__ import annotations

import dataclasses
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from app import container, seeding
from app import tensor as T
from app.cnn import FeatureGrid
from app.errors import (
    DataError,
    EmptyCorpusError,
    MissingWeightError,
    NonFiniteError,
    NonFiniteWeightsError,
    ShapeError,
    ShapeMismatchError,
)
from app.metrics import TRAIN_ITERATIONS_TOTAL
from app.models import TrainHyperParams
from app.preprocess import PreprocessParams, apply_values
from app.tensor import Tape, Tensor

logger = logging.getLogger("vlm.train")

DIRECTIONS = ("right", "left", "down", "up")
GATES = ("i", "f", "o", "c")


# ------------------------- Parameters -------------------------------

@dataclass(frozen=True)
class LstmParams:
    wx_i: Tensor
    wh_i: Tensor
    b_i: Tensor
    wx_f: Tensor
    wh_f: Tensor
    b_f: Tensor
    wx_o: Tensor
    wh_o: Tensor
    b_o: Tensor
    wx_c: Tensor
    wh_c: Tensor
    b_c: Tensor

    @property
    def d_in(self) -> int:
        return self.wx_i.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.wh_i.shape[0]


@dataclass(frozen=True)
class RnnParams:
    wx: Tensor
    wh: Tensor
    b: Tensor

    @property
    def d_in(self) -> int:
        return self.wx.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.wh.shape[0]


CellParams = Union[LstmParams, RnnParams]


@dataclass(frozen=True)
class PredictorStack:
    lstm1: CellParams
    lstm2: CellParams
    out_w: Tensor  # D_h x D_in
    out_b: Tensor  # D_in

    @property
    def cell(self) -> str:
        return "rnn" if isinstance(self.lstm1, RnnParams) else "lstm"

    @property
    def d_in(self) -> int:
        return self.lstm1.d_in


@dataclass(frozen=True)
class VlmLayerModel:
    layer_name: str
    preprocess: PreprocessParams
    predictors: Mapping[str, PredictorStack]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def d_in(self) -> int:
        return self.preprocess.k


@dataclass(frozen=True)
class UnnaturalnessMap:
    values: Tensor  # (H-1) x (W-1)


def _walk(obj: Any, prefix: str) -> Iterable[Tuple[str, Tensor]]:
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        name = f"{prefix}.{f.name}" if prefix else f.name
        if isinstance(value, Tensor):
            yield name, value
        elif dataclasses.is_dataclass(value):
            yield from _walk(value, name)


def _rebuild(obj: Any, prefix: str, values: Mapping[str, Any]) -> Any:
    changes = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        name = f"{prefix}.{f.name}" if prefix else f.name
        if isinstance(value, Tensor):
            if name in values:
                new = Tensor(values[name])
                if new.shape != value.shape:
                    raise ShapeError(f"parameter {name}: new shape {new.shape}, expected {value.shape}")
                changes[f.name] = new
        elif dataclasses.is_dataclass(value):
            changes[f.name] = _rebuild(value, name, values)
    return dataclasses.replace(obj, **changes)


def named_parameters(model: VlmLayerModel) -> Dict[str, Tensor]:
    """Flat view "<direction>.<layer>.<param>" of every trainable tensor."""
    params: Dict[str, Tensor] = {}
    for direction in DIRECTIONS:
        params.update(_walk(model.predictors[direction], direction))
    return params


def replace_parameters(model: VlmLayerModel, values: Mapping[str, Any]) -> VlmLayerModel:
    predictors = {d: _rebuild(model.predictors[d], d, values) for d in DIRECTIONS}
    return dataclasses.replace(model, predictors=predictors)


# ------------------------- Cells -------------------------------

def _as_batch(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 1:
        return T.reshape(x, (1, x.shape[0])), True
    if x.ndim != 2:
        raise ShapeError(f"cell input must be a vector or a batch of vectors, got {x.shape}")
    return x, False


def _affine(wx: Tensor, wh: Tensor, b: Tensor, x: Tensor, h: Tensor) -> Tensor:
    return T.add_bias(T.matmul(x, wx) + T.matmul(h, wh), b)


def rnn_step(w_x: Tensor, w_h: Tensor, b: Tensor, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """h_t = tanh(W_x x_t + W_h h_{t-1} + b)."""
    x, squeeze = _as_batch(x_t)
    h, _ = _as_batch(h_prev)
    out = T.tanh(_affine(w_x, w_h, b, x, h))
    return T.reshape(out, (out.shape[1],)) if squeeze else out


def lstm_step(params: LstmParams, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> Tuple[Tensor, Tensor]:
    x, squeeze = _as_batch(x_t)
    h, _ = _as_batch(h_prev)
    c, _ = _as_batch(c_prev)
    i = T.sigmoid(_affine(params.wx_i, params.wh_i, params.b_i, x, h))
    f = T.sigmoid(_affine(params.wx_f, params.wh_f, params.b_f, x, h))
    o = T.sigmoid(_affine(params.wx_o, params.wh_o, params.b_o, x, h))
    candidate = T.tanh(_affine(params.wx_c, params.wh_c, params.b_c, x, h))
    c_t = i * candidate + f * c
    h_t = o * T.tanh(c_t)
    if squeeze:
        d = h_t.shape[1]
        return T.reshape(h_t, (d,)), T.reshape(c_t, (d,))
    return h_t, c_t


def _cell(params: CellParams, x: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
    if isinstance(params, RnnParams):
        return rnn_step(params.wx, params.wh, params.b, x, h), c
    return lstm_step(params, x, h, c)


def predict_sequence(stack: PredictorStack, s: Tensor) -> Tensor:
    """Predictions mu_2..mu_T for s (T x D) or a batch (N x T x D); mu_t sees s_1..s_{t-1} only."""
    squeeze = s.ndim == 2
    if squeeze:
        s = T.reshape(s, (1,) + s.shape)
    if s.ndim != 3:
        raise ShapeError(f"sequence must be T x D or N x T x D, got {s.shape}")
    n, steps, depth = s.shape
    if steps < 2:
        raise ShapeError(f"sequence length {steps} < 2 has nothing to predict")
    if depth != stack.d_in:
        raise ShapeError(f"sequence depth {depth} does not match predictor input {stack.d_in}")

    h1 = c1 = T.zeros((n, stack.lstm1.d_hidden))
    h2 = c2 = T.zeros((n, stack.lstm2.d_hidden))
    preds = []
    for t in range(steps - 1):
        x = s[:, t, :]
        h1, c1 = _cell(stack.lstm1, x, h1, c1)
        h2, c2 = _cell(stack.lstm2, h1, h2, c2)
        preds.append(T.add_bias(T.matmul(h2, stack.out_w), stack.out_b))
    mu = T.stack(preds, axis=1)
    return T.reshape(mu, mu.shape[1:]) if squeeze else mu


def _squared_errors(stack: PredictorStack, s: Tensor) -> Tensor:
    """||s_t - mu_t||^2 for t = 2..T, shape N x (T-1)."""
    mu = predict_sequence(stack, s)
    diff = s[:, 1:, :] - mu
    return T.sum(diff * diff, axis=2)


def _position_weights(steps: int) -> np.ndarray:
    return np.arange(2, steps + 1) / steps


def sequence_nll(s: Tensor, mu: Tensor) -> Tensor:
    """(1/T) sum_{t=2..T} (t/T) ||s_t - mu_t||^2 for one sequence s (T x D), mu ((T-1) x D)."""
    if s.ndim != 2 or mu.ndim != 2:
        raise ShapeError(f"sequence_nll expects T x D and (T-1) x D, got {s.shape} and {mu.shape}")
    steps = s.shape[0]
    if mu.shape != (steps - 1, s.shape[1]):
        raise ShapeError(f"{mu.shape[0]} predictions for a sequence of length {steps}")
    diff = s[1:] - mu
    err = T.sum(diff * diff, axis=1)
    return T.sum(err * Tensor(_position_weights(steps))) * (1.0 / steps)


# ------------------------- Unnaturalness -------------------------------

def _scan(model: VlmLayerModel, x: Tensor, direction: str) -> Tensor:
    """Squared-error maps in grid coordinates for a batch x (B x H x W x K).

    right/left give B x H x (W-1): right[.., j] is the error at column j+1, left[.., j] at column j.
    down/up give B x (H-1) x W: down[.., i, :] is the error at row i+1, up[.., i, :] at row i.
    """
    b, h, w, k = x.shape
    stack = model.predictors[direction]
    if direction in ("right", "left"):
        src = T.flip(x, axis=2) if direction == "left" else x
        err = T.reshape(_squared_errors(stack, T.reshape(src, (b * h, w, k))), (b, h, w - 1))
        return T.flip(err, axis=2) if direction == "left" else err
    src = T.flip(x, axis=1) if direction == "up" else x
    cols = T.reshape(T.transpose(src, (0, 2, 1, 3)), (b * w, h, k))
    err = T.transpose(T.reshape(_squared_errors(stack, cols), (b, w, h - 1)), (0, 2, 1))
    return T.flip(err, axis=1) if direction == "up" else err


def _map_weights(h: int, w: int, symmetric: bool) -> Dict[str, np.ndarray]:
    i = np.arange(h - 1, dtype=np.float64)[:, None]
    j = np.arange(w - 1, dtype=np.float64)[None, :]
    ones = np.ones((h - 1, w - 1))
    shift = 1.0 if symmetric else 0.0
    return {
        "right": ones * (j + 2) / w,
        "left": ones * (w - j - shift) / w,
        "down": ones * (i + 2) / h,
        "up": ones * (h - i - shift) / h,
    }


def _batch_map(model: VlmLayerModel, x: Tensor, symmetric: bool = False) -> Tensor:
    b, h, w, _ = x.shape
    weights = _map_weights(h, w, symmetric)
    all_ = slice(None)
    crops = {
        "right": (all_, slice(None, -1), all_),
        "left": (all_, slice(None, -1), all_),
        "down": (all_, all_, slice(None, -1)),
        "up": (all_, all_, slice(None, -1)),
    }
    total: Optional[Tensor] = None
    for direction in DIRECTIONS:
        err = _scan(model, x, direction)[crops[direction]]
        term = err * Tensor(np.broadcast_to(weights[direction], (b, h - 1, w - 1)))
        total = term if total is None else total + term
    return total


def _prepare(model: VlmLayerModel, values: Tensor, already_preprocessed: bool) -> Tensor:
    if values.ndim != 3:
        raise ShapeError(f"feature grid must be H x W x D, got {values.shape}")
    h, w, depth = values.shape
    if h < 2 or w < 2:
        raise ShapeError(f"feature grid {h}x{w} is too small for directional scans")
    expected = model.d_in if already_preprocessed else model.preprocess.depth
    if depth != expected:
        raise ShapeError(f"feature depth {depth} does not match layer model depth {expected}")
    return values if already_preprocessed else apply_values(model.preprocess, values)


def unnaturalness_map(
    model: VlmLayerModel,
    grid: Union[FeatureGrid, Tensor],
    already_preprocessed: bool = False,
    symmetric: bool = False,
) -> UnnaturalnessMap:
    values = grid.values if isinstance(grid, FeatureGrid) else grid
    x = _prepare(model, values, already_preprocessed)
    u = _batch_map(model, T.reshape(x, (1,) + x.shape), symmetric=symmetric)
    return UnnaturalnessMap(values=T.reshape(u, u.shape[1:]))


def layer_unnaturalness(umap: Union[UnnaturalnessMap, Tensor]) -> Tensor:
    """Mean of the map entries (0-d tensor)."""
    values = umap.values if isinstance(umap, UnnaturalnessMap) else umap
    if values.size == 0:
        raise DataError("layer_unnaturalness: empty map")
    return T.mean(values)


def image_unnaturalness(per_layer: Mapping[str, Union[Tensor, float]], lambdas: Mapping[str, float]) -> Tensor:
    missing = sorted(set(per_layer) - set(lambdas))
    if missing:
        raise MissingWeightError(f"no lambda weight for layers {missing}")
    total = T.zeros(())
    for name in sorted(per_layer):
        total = total + T.as_tensor(per_layer[name]) * float(lambdas[name])
    return total


def default_lambdas(names: Sequence[str]) -> Dict[str, float]:
    """10^-(n-1) for conv<n>; other names by position."""
    out = {}
    for pos, name in enumerate(names):
        m = re.fullmatch(r"conv(\d+)", name)
        n = int(m.group(1)) if m else pos + 1
        out[name] = 10.0 ** -(n - 1)
    return out


# ------------------------- Initialization -------------------------------

def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    r = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-r, r, size=shape))


def _init_cell(rng: np.random.Generator, cell: str, d_in: int, d_h: int) -> CellParams:
    if cell == "rnn":
        return RnnParams(wx=_uniform(rng, (d_in, d_h), d_in), wh=_uniform(rng, (d_h, d_h), d_h), b=T.zeros((d_h,)))
    kw = {}
    for g in GATES:
        kw[f"wx_{g}"] = _uniform(rng, (d_in, d_h), d_in)
        kw[f"wh_{g}"] = _uniform(rng, (d_h, d_h), d_h)
        kw[f"b_{g}"] = Tensor(np.ones(d_h)) if g == "f" else T.zeros((d_h,))
    return LstmParams(**kw)


def init_layer_model(
    layer_name: str,
    preprocess: PreprocessParams,
    seed: int = 0,
    cell: str = "lstm",
    metadata: Optional[Dict[str, Any]] = None,
) -> VlmLayerModel:
    d_in = preprocess.k
    d_h = max(1, d_in // 2)
    predictors = {}
    for direction in DIRECTIONS:
        rng = seeding.stream(seed, f"init.{layer_name}.{direction}")
        predictors[direction] = PredictorStack(
            lstm1=_init_cell(rng, cell, d_in, d_h),
            lstm2=_init_cell(rng, cell, d_h, d_h),
            out_w=_uniform(rng, (d_h, d_in), d_h),
            out_b=T.zeros((d_in,)),
        )
    meta = {"layer_name": layer_name, "seed": seed, "cell": cell, "iterations": 0}
    meta.update(metadata or {})
    return VlmLayerModel(layer_name=layer_name, preprocess=preprocess, predictors=predictors, metadata=meta)


# ------------------------- Training -------------------------------

def _per_direction_loss(model: VlmLayerModel, x: Tensor) -> Tensor:
    """Sum over directions of the mean sequence NLL of that direction's scans."""
    b, h, w, k = x.shape
    total = T.zeros(())
    for direction in DIRECTIONS:
        if direction in ("right", "left"):
            src = T.flip(x, axis=2) if direction == "left" else x
            seqs, steps = T.reshape(src, (b * h, w, k)), w
        else:
            src = T.flip(x, axis=1) if direction == "up" else x
            seqs, steps = T.reshape(T.transpose(src, (0, 2, 1, 3)), (b * w, h, k)), h
        err = _squared_errors(model.predictors[direction], seqs)
        weights = np.broadcast_to(_position_weights(steps) / steps, err.shape)
        total = total + T.sum(err * Tensor(weights)) * (1.0 / err.shape[0])
    return total


def _group_loss(model: VlmLayerModel, x: Tensor, objective: str) -> Tensor:
    if objective == "per_direction":
        return _per_direction_loss(model, x)
    return T.mean(_batch_map(model, x))


def _stack_batch(model: VlmLayerModel, grids: Sequence[Any], already_preprocessed: bool) -> List[Tensor]:
    """Preprocessed batches, one per distinct grid shape, in first-seen order."""
    groups: Dict[Tuple[int, ...], List[Tensor]] = {}
    for grid in grids:
        values = grid.values if isinstance(grid, FeatureGrid) else T.as_tensor(grid)
        x = _prepare(model, values, already_preprocessed)
        groups.setdefault(x.shape, []).append(x)
    return [T.stack(xs, axis=0) for xs in groups.values()]


def minibatch_loss(
    model: VlmLayerModel,
    minibatch: Sequence[Any],
    objective: str = "joint",
    already_preprocessed: bool = False,
) -> Tensor:
    """Mean loss over the minibatch (joint: mean layer unnaturalness)."""
    if not minibatch:
        raise EmptyCorpusError("empty minibatch")
    total = T.zeros(())
    for batch in _stack_batch(model, minibatch, already_preprocessed):
        total = total + _group_loss(model, batch, objective) * (batch.shape[0] / len(minibatch))
    return total


def bptt_gradients(
    model: VlmLayerModel,
    minibatch: Sequence[Any],
    objective: str = "joint",
    already_preprocessed: bool = False,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Minibatch loss and its exact gradient w.r.t. every named parameter, unrolled over full scans."""
    params = named_parameters(model)
    with Tape() as tape:
        tape.watch(*params.values())
        loss = minibatch_loss(model, minibatch, objective, already_preprocessed)
    grads = tape.gradient(loss, list(params.values()))
    return loss.item(), dict(zip(params.keys(), grads))


def _clip(grads: Dict[str, np.ndarray], clip_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def train(
    model: VlmLayerModel,
    corpus: Iterable[FeatureGrid],
    hp: TrainHyperParams,
) -> Tuple[VlmLayerModel, List[float]]:
    grids = [apply_values(model.preprocess, g.values if isinstance(g, FeatureGrid) else T.as_tensor(g)) for g in corpus]
    if not grids:
        raise EmptyCorpusError(f"no feature grids to train layer {model.layer_name!r} on")
    for g in grids:
        _prepare(model, g, already_preprocessed=True)

    rng = seeding.stream(hp.seed, f"sampling.{model.layer_name}")
    order = rng.permutation(len(grids))
    cursor = 0

    params = {name: t.numpy() for name, t in named_parameters(model).items()}
    velocity = {name: np.zeros_like(v) for name, v in params.items()}
    history: List[float] = []
    if hp.lr == 0:
        logger.warning("[train] lr=0 layer=%s parameters will not move", model.layer_name)

    for it in range(hp.max_iters):
        batch = []
        for _ in range(hp.batch):
            if cursor == len(order):
                order, cursor = rng.permutation(len(grids)), 0
            batch.append(grids[order[cursor]])
            cursor += 1

        loss, grads = bptt_gradients(model, batch, hp.objective, already_preprocessed=True)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NonFiniteError(f"non-finite loss at iteration {it} (layer {model.layer_name})", index=it)
        gnorm = _clip(grads, hp.clip_norm)

        lr = hp.lr_at(it)
        for name in params:
            velocity[name] = hp.momentum * velocity[name] - lr * grads[name]
            params[name] = params[name] + velocity[name]
        model = replace_parameters(model, params)

        history.append(loss)
        TRAIN_ITERATIONS_TOTAL.labels(layer=model.layer_name).inc()
        if it % hp.log_every == 0 or it == hp.max_iters - 1:
            logger.info("[train] layer=%s iter=%d loss=%.6g lr=%.3g grad_norm=%.3g", model.layer_name, it, loss, lr, gnorm)

    meta = dict(model.metadata)
    meta["iterations"] = int(meta.get("iterations", 0)) + hp.max_iters
    meta["hyperparams"] = hp.model_dump()
    return dataclasses.replace(model, metadata=meta), history


def smoothed(history: Sequence[float], window: int = 20) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    h = np.asarray(history, dtype=np.float64)
    if h.size == 0:
        return h
    c = np.cumsum(np.insert(h, 0, 0.0))
    idx = np.arange(1, h.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# ------------------------- Persistence -------------------------------

def save_vlm(model: VlmLayerModel, path: Union[str, Path]) -> None:
    pre = model.preprocess
    tensors: Dict[str, np.ndarray] = {
        "pre.mean": pre.mean,
        "pre.std": pre.std,
        "pre.proj": pre.projection,
        "pre.eig": pre.eigenvalues,
    }
    for name, t in named_parameters(model).items():
        tensors[name] = t.data
    meta = dict(model.metadata)
    meta.update(
        {
            "layer_name": model.layer_name,
            "depth": pre.depth,
            "k": pre.k,
            "whiten": pre.whiten,
            "cell": model.predictors["right"].cell,
        }
    )
    container.write(path, container.MAGIC_MODEL, tensors, meta)


def load_vlm(path: Union[str, Path]) -> VlmLayerModel:
    tensors, meta = container.read(path, container.MAGIC_MODEL)
    for name, arr in tensors.items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteWeightsError(f"{path}: tensor {name!r} is not finite")
    try:
        mean, std, proj = tensors["pre.mean"], tensors["pre.std"], tensors["pre.proj"]
    except KeyError as e:
        raise ShapeMismatchError(f"{path}: missing preprocessing tensor {e}") from e
    k = proj.shape[1] if proj.ndim == 2 else -1
    if mean.shape != std.shape or proj.shape != (mean.shape[0], k):
        raise ShapeMismatchError(f"{path}: preprocessing shapes {mean.shape} {std.shape} {proj.shape} disagree")
    eig = tensors.get("pre.eig", np.ones(k))
    preprocess = PreprocessParams(
        mean=mean.astype(np.float64),
        std=std.astype(np.float64),
        projection=proj.astype(np.float64),
        eigenvalues=eig.astype(np.float64),
        whiten=bool(meta.get("whiten", False)),
    )

    layer_name = meta.get("layer_name", "")
    skeleton = init_layer_model(layer_name, preprocess, cell=meta.get("cell", "lstm"))
    expected = named_parameters(skeleton)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise ShapeMismatchError(f"{path}: missing parameter tensors {missing[:5]}")
    for name, t in expected.items():
        if tensors[name].shape != t.shape:
            raise ShapeMismatchError(f"{path}: {name} has shape {tensors[name].shape}, expected {t.shape}")
    model = replace_parameters(skeleton, {name: tensors[name] for name in expected})
    model = dataclasses.replace(model, metadata=dict(meta))
    logger.debug("[vlm] loaded path=%s layer=%s k=%d", path, layer_name, k)
    return model
