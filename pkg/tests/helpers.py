"""Builders shared by the test modules."""
from __future__ import annotations

from typing import Dict, List, Sequence

import numpy as np

from app import cnn, preprocess, vlm
from app import tensor as T
from app.models import CnnSpec
from app.preprocess import PreprocessParams
from app.tensor import Tensor


def identity_preprocess(depth: int) -> PreprocessParams:
    """mean 0, std 1, projection = first floor(depth/2) columns of the identity."""
    k = depth // 2
    return PreprocessParams(
        mean=np.zeros(depth),
        std=np.ones(depth),
        projection=np.eye(depth)[:, :k],
        eigenvalues=np.ones(k),
    )


def random_model(k: int, seed: int = 0, cell: str = "lstm", layer: str = "conv1") -> vlm.VlmLayerModel:
    return vlm.init_layer_model(layer, identity_preprocess(2 * k), seed=seed, cell=cell)


def zero_stack(k: int, out_b: np.ndarray) -> vlm.PredictorStack:
    """All weights zero; the stack always predicts out_b."""
    d_h = max(1, k // 2)

    def cell(d_in: int) -> vlm.LstmParams:
        kw = {}
        for g in vlm.GATES:
            kw[f"wx_{g}"] = T.zeros((d_in, d_h))
            kw[f"wh_{g}"] = T.zeros((d_h, d_h))
            kw[f"b_{g}"] = T.zeros((d_h,))
        return vlm.LstmParams(**kw)

    return vlm.PredictorStack(lstm1=cell(k), lstm2=cell(d_h), out_w=T.zeros((d_h, k)), out_b=Tensor(out_b))


def zero_model(k: int, out_b: np.ndarray) -> vlm.VlmLayerModel:
    return vlm.VlmLayerModel(
        layer_name="conv1",
        preprocess=identity_preprocess(2 * k),
        predictors={d: zero_stack(k, out_b) for d in vlm.DIRECTIONS},
    )


def random_images(rng: np.random.Generator, count: int, size: int) -> List[np.ndarray]:
    return [rng.standard_normal((size, size, 3)) for _ in range(count)]


def fitted_layer_models(model: cnn.CnnModel, images: Sequence[np.ndarray], seed: int = 0) -> List[vlm.VlmLayerModel]:
    """Untrained layer models with preprocessing fitted on the images' tap features."""
    per_tap: Dict[str, list] = {tap: [] for tap in model.spec.taps}
    for image in images:
        for tap, grid in cnn.forward(model, Tensor(image)).items():
            per_tap[tap].append(grid)
    return [
        vlm.init_layer_model(tap, preprocess.fit(grids), seed=seed + i)
        for i, (tap, grids) in enumerate(per_tap.items())
    ]


def conv_spec(layers: list, taps: Sequence[str], size: Sequence[int]) -> CnnSpec:
    return CnnSpec.model_validate({"layers": layers, "taps": list(taps), "input_size": tuple(size)})


def conv(name: str, out: int, k: int = 3, stride: int = 1, pad: int = 0) -> dict:
    return {"kind": "conv", "name": name, "out_channels": out, "kernel_h": k, "kernel_w": k, "stride": stride, "pad": pad}


def small_conv_net(convs: int, size: int, seed: int, channels: int = 4) -> cnn.CnnModel:
    """`convs` padded 3x3 convs with ReLUs between, every conv a tap."""
    layers: list = []
    for i in range(1, convs + 1):
        if i > 1:
            layers.append({"kind": "relu", "name": f"relu{i - 1}"})
        layers.append(conv(f"conv{i}", channels, pad=1))
    taps = [f"conv{i}" for i in range(1, convs + 1)]
    return cnn.init_random(conv_spec(layers, taps, (size, size, 3)), np.random.default_rng(seed))
