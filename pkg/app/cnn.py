# app/cnn.py
"""
Feed-forward CNN (convolution, ReLU, max-pooling, optional final flatten+linear) that
exports feature grids at named taps and pulls tap cotangents back to the image.

Images are H x W x 3; internally activations are C x H x W; taps come back H x W x D.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from app import container
from app import tensor as T
from app.errors import (
    DataError,
    FormatError,
    NonFiniteWeightsError,
    ShapeError,
    ShapeMismatchError,
)
from app.models import CnnSpec, ConvLayer, MaxPoolLayer, ReluLayer
from app.tensor import Tape, Tensor

logger = logging.getLogger("vlm.cnn")


@dataclass(frozen=True)
class FeatureGrid:
    layer_name: str
    values: Tensor  # H x W x D

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def depth(self) -> int:
        return self.values.shape[2]


def expected_weight_shapes(spec: CnnSpec) -> Dict[str, Tuple[Tuple[int, ...], Tuple[int, ...]]]:
    fan_in = spec.input_channels()
    shapes = {}
    for layer in spec.layers:
        if layer.kind == "conv":
            shapes[layer.name] = ((layer.out_channels, fan_in[layer.name], layer.kernel_h, layer.kernel_w), (layer.out_channels,))
        elif layer.kind == "linear":
            shapes[layer.name] = ((fan_in[layer.name], layer.out_features), (layer.out_features,))
    return shapes


@dataclass(frozen=True)
class CnnModel:
    spec: CnnSpec
    weights: Mapping[str, Tuple[np.ndarray, np.ndarray]]  # layer -> (kernel, bias)

    def __post_init__(self) -> None:
        expected = expected_weight_shapes(self.spec)
        if set(expected) != set(self.weights):
            raise ShapeMismatchError(
                f"weights for layers {sorted(self.weights)} do not match parametrized layers {sorted(expected)}"
            )
        for name, (k_shape, b_shape) in expected.items():
            kernel, bias = self.weights[name]
            if kernel.shape != k_shape or bias.shape != b_shape:
                raise ShapeMismatchError(
                    f"layer {name!r}: kernel {kernel.shape} / bias {bias.shape}, expected {k_shape} / {b_shape}"
                )
            if not (np.all(np.isfinite(kernel)) and np.all(np.isfinite(bias))):
                raise NonFiniteWeightsError(f"layer {name!r} has non-finite weights")

    @property
    def input_size(self) -> Tuple[int, int, int]:
        return self.spec.input_size

    def tap_shapes(self) -> Dict[str, Tuple[int, int, int]]:
        """Tap outputs as (H, W, D)."""
        shapes = self.spec.output_shapes()
        return {tap: (shapes[tap][1], shapes[tap][2], shapes[tap][0]) for tap in self.spec.taps}


def init_random(spec: CnnSpec, rng: np.random.Generator, bias_scale: float = 0.1) -> CnnModel:
    """He-scaled Gaussian kernels, small Gaussian biases."""
    weights = {}
    for name, (k_shape, b_shape) in expected_weight_shapes(spec).items():
        fan_in = int(np.prod(k_shape[1:])) if len(k_shape) == 4 else k_shape[0]
        kernel = rng.standard_normal(k_shape) * np.sqrt(2.0 / fan_in)
        weights[name] = (kernel, rng.standard_normal(b_shape) * bias_scale)
    return CnnModel(spec=spec, weights=weights)


def forward(model: CnnModel, image: Tensor, post_relu: bool = False) -> Dict[str, FeatureGrid]:
    """Run the net; taps are taken before the following ReLU unless `post_relu`."""
    if image.shape != tuple(model.input_size):
        raise ShapeError(f"image shape {image.shape} does not match declared input {tuple(model.input_size)}")

    x = T.transpose(image, (2, 0, 1))
    outputs: Dict[str, Tensor] = {}
    for layer in model.spec.layers:
        if isinstance(layer, ConvLayer):
            kernel, bias = model.weights[layer.name]
            x = T.conv2d(x, Tensor(kernel), Tensor(bias), stride=layer.stride, pad=layer.pad)
        elif isinstance(layer, ReluLayer):
            x = T.relu(x)
        elif isinstance(layer, MaxPoolLayer):
            x = T.maxpool2d(x, kernel=layer.kernel, stride=layer.stride)
        else:
            kernel, bias = model.weights[layer.name]
            flat = T.reshape(x, (1, x.size))
            x = T.reshape(T.add_bias(T.matmul(flat, Tensor(kernel)), Tensor(bias)), (layer.out_features, 1, 1))
        outputs[layer.name] = x

    layers = model.spec.layers
    grids: Dict[str, FeatureGrid] = {}
    for tap in model.spec.taps:
        source = tap
        if post_relu:
            pos = next(i for i, layer in enumerate(layers) if layer.name == tap)
            if pos + 1 < len(layers) and layers[pos + 1].kind == "relu":
                source = layers[pos + 1].name
        grids[tap] = FeatureGrid(layer_name=tap, values=T.transpose(outputs[source], (1, 2, 0)))
    return grids


def input_gradient(
    model: CnnModel,
    image: Tensor,
    tap_cotangents: Mapping[str, Union[np.ndarray, Tensor]],
    post_relu: bool = False,
) -> Tensor:
    """Sum over taps of the pullback of each cotangent to image space."""
    shapes = model.tap_shapes()
    for tap, cot in tap_cotangents.items():
        if tap not in shapes:
            raise DataError(f"unknown tap {tap!r}; model exports {sorted(shapes)}")
        if tuple(cot.shape) != shapes[tap]:
            raise ShapeError(f"cotangent for {tap!r} has shape {tuple(cot.shape)}, tap is {shapes[tap]}")

    img = Tensor(image)
    with Tape() as tape:
        tape.watch(img)
        grids = forward(model, img, post_relu=post_relu)
        total = T.zeros(())
        for tap, cot in tap_cotangents.items():
            total = total + T.sum(T.mul(grids[tap].values, T.as_tensor(cot)))
    (grad,) = tape.gradient(total, [img])
    return Tensor(grad)


def conv2d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct six-loop convolution, C x H x W in and out."""
    c_in, h, width = x.shape
    c_out, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (width + 2 * pad - kw) // stride + 1
    padded = np.zeros((c_in, h + 2 * pad, width + 2 * pad), dtype=x.dtype)
    padded[:, pad:pad + h, pad:pad + width] = x
    out = np.zeros((c_out, oh, ow), dtype=x.dtype)
    for o in range(c_out):
        for y in range(oh):
            for xx in range(ow):
                acc = b[o]
                for c in range(c_in):
                    for ky in range(kh):
                        for kx in range(kw):
                            acc += w[o, c, ky, kx] * padded[c, y * stride + ky, xx * stride + kx]
                out[o, y, xx] = acc
    return out


# ------------------------- Persistence -------------------------------

def save_model(model: CnnModel, path: Union[str, Path]) -> None:
    tensors: Dict[str, np.ndarray] = {}
    for name, (kernel, bias) in model.weights.items():
        tensors[f"{name}.kernel"] = kernel
        tensors[f"{name}.bias"] = bias
    container.write(path, container.MAGIC_WEIGHTS, tensors, {"spec": model.spec.model_dump()})


def load_model(path: Union[str, Path]) -> CnnModel:
    tensors, meta = container.read(path, container.MAGIC_WEIGHTS)
    try:
        spec = CnnSpec.model_validate(meta.get("spec"))
    except ValidationError as e:
        raise FormatError(f"{path}: invalid layer header: {e}") from e

    weights = {}
    for name, (k_shape, b_shape) in expected_weight_shapes(spec).items():
        kernel = tensors.get(f"{name}.kernel")
        bias = tensors.get(f"{name}.bias")
        if kernel is None or bias is None:
            raise ShapeMismatchError(f"{path}: missing tensors for layer {name!r}")
        if kernel.shape != k_shape or bias.shape != b_shape:
            raise ShapeMismatchError(
                f"{path}: layer {name!r} stores kernel {kernel.shape} / bias {bias.shape}, header implies {k_shape} / {b_shape}"
            )
        weights[name] = (kernel, bias)
    model = CnnModel(spec=spec, weights=weights)
    logger.debug("[cnn] loaded path=%s layers=%d taps=%s", path, len(spec.layers), spec.taps)
    return model


def alexnet_like_spec(taps: Optional[list] = None) -> CnnSpec:
    """Convolution geometry of the five-conv ImageNet net (227 x 227 input)."""
    layers = [
        {"kind": "conv", "name": "conv1", "out_channels": 96, "kernel_h": 11, "kernel_w": 11, "stride": 4, "pad": 0},
        {"kind": "relu", "name": "relu1"},
        {"kind": "maxpool", "name": "pool1", "kernel": 3, "stride": 2},
        {"kind": "conv", "name": "conv2", "out_channels": 256, "kernel_h": 5, "kernel_w": 5, "stride": 1, "pad": 2},
        {"kind": "relu", "name": "relu2"},
        {"kind": "maxpool", "name": "pool2", "kernel": 3, "stride": 2},
        {"kind": "conv", "name": "conv3", "out_channels": 384, "kernel_h": 3, "kernel_w": 3, "stride": 1, "pad": 1},
        {"kind": "relu", "name": "relu3"},
        {"kind": "conv", "name": "conv4", "out_channels": 384, "kernel_h": 3, "kernel_w": 3, "stride": 1, "pad": 1},
        {"kind": "relu", "name": "relu4"},
        {"kind": "conv", "name": "conv5", "out_channels": 256, "kernel_h": 3, "kernel_w": 3, "stride": 1, "pad": 1},
    ]
    return CnnSpec.model_validate(
        {"layers": layers, "taps": taps or ["conv1", "conv2", "conv3", "conv4", "conv5"], "input_size": (227, 227, 3)}
    )
