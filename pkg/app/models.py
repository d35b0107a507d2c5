# app/models.py
# Schemas exchanged between config files, artifact headers and the pipeline. Pydantic v2.

from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app import config, seeding
from app.errors import UsageError
from app.tensor import conv_output_size


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ------------------------- CNN spec -------------------------------

class ConvLayer(_Strict):
    kind: Literal["conv"] = "conv"
    name: str = Field(..., min_length=1)
    out_channels: int = Field(..., ge=1)
    kernel_h: int = Field(..., ge=1)
    kernel_w: int = Field(..., ge=1)
    stride: int = Field(1, ge=1)
    pad: int = Field(0, ge=0)


class ReluLayer(_Strict):
    kind: Literal["relu"] = "relu"
    name: str = Field(..., min_length=1)


class MaxPoolLayer(_Strict):
    kind: Literal["maxpool"] = "maxpool"
    name: str = Field(..., min_length=1)
    kernel: int = Field(..., ge=1)
    stride: int = Field(..., ge=1)


class LinearLayer(_Strict):
    """Flatten (C, H, W order) followed by a dense map; only valid as the last layer."""

    kind: Literal["linear"] = "linear"
    name: str = Field(..., min_length=1)
    out_features: int = Field(..., ge=1)


LayerSpec = Annotated[Union[ConvLayer, ReluLayer, MaxPoolLayer, LinearLayer], Field(discriminator="kind")]


class CnnSpec(_Strict):
    """Layer list, exported taps and the declared input size (height, width, channels)."""

    layers: List[LayerSpec]
    taps: List[str]
    input_size: Tuple[int, int, int]

    @model_validator(mode="after")
    def _check(self) -> "CnnSpec":
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        kinds = {layer.name: layer.kind for layer in self.layers}
        for tap in self.taps:
            if kinds.get(tap) not in ("conv", "linear"):
                raise ValueError(f"tap {tap!r} does not name a conv or linear layer")
        for layer in self.layers[:-1]:
            if layer.kind == "linear":
                raise ValueError(f"linear layer {layer.name!r} must be last")
        self.output_shapes()
        return self

    def output_shapes(self) -> Dict[str, Tuple[int, int, int]]:
        """Output (channels, height, width) of every layer for the declared input size."""
        h, w, c = self.input_size
        if min(h, w, c) < 1:
            raise ValueError(f"input size {self.input_size} must be positive")
        shapes: Dict[str, Tuple[int, int, int]] = {}
        for layer in self.layers:
            if layer.kind == "conv":
                h = conv_output_size(h, layer.kernel_h, layer.stride, layer.pad)
                w = conv_output_size(w, layer.kernel_w, layer.stride, layer.pad)
                c = layer.out_channels
            elif layer.kind == "maxpool":
                h = (h - layer.kernel) // layer.stride + 1
                w = (w - layer.kernel) // layer.stride + 1
            elif layer.kind == "linear":
                c, h, w = layer.out_features, 1, 1
            if h < 1 or w < 1:
                raise ValueError(f"layer {layer.name!r} has empty output {h}x{w}")
            shapes[layer.name] = (c, h, w)
        return shapes

    def input_channels(self) -> Dict[str, int]:
        """Channels (conv) or flattened features (linear) entering each layer."""
        h, w, c = self.input_size
        out: Dict[str, int] = {}
        prev = (c, h, w)
        shapes = self.output_shapes()
        for layer in self.layers:
            out[layer.name] = prev[0] if layer.kind != "linear" else prev[0] * prev[1] * prev[2]
            prev = shapes[layer.name]
        return out


# ------------------------- Training -------------------------------

PRESETS: Dict[str, Dict[str, Any]] = {
    # AlexNet-feature run
    "alexnet": {"lr": 10.0, "momentum": 0.9, "batch": 16, "lr_decay_factor": 0.1, "lr_decay_every": 5000, "max_iters": 20000},
    # VGG-feature run
    "vgg": {"lr": 20.0, "momentum": 0.9, "batch": 1, "lr_decay_factor": 0.1, "lr_decay_every": 5000, "max_iters": 20000},
    # toy CNN on synthetic images
    "desk": {"lr": 0.01, "momentum": 0.9, "batch": 16, "lr_decay_factor": 0.1, "lr_decay_every": 5000, "max_iters": 300},
}


class TrainHyperParams(_Strict):
    lr: float = Field(PRESETS["desk"]["lr"], ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch: int = Field(16, ge=1)
    lr_decay_factor: float = Field(0.1, gt=0, le=1)
    lr_decay_every: int = Field(5000, ge=1)
    max_iters: int = Field(PRESETS["desk"]["max_iters"], ge=0)
    seed: int = 0
    clip_norm: float = Field(config.CLIP_NORM, ge=0)
    objective: Literal["joint", "per_direction"] = "joint"
    cell: Literal["lstm", "rnn"] = "lstm"
    whiten: bool = False
    log_every: int = Field(config.LOG_EVERY, ge=1)

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "TrainHyperParams":
        if name not in PRESETS:
            raise UsageError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def lr_at(self, iteration: int) -> float:
        return self.lr * self.lr_decay_factor ** (iteration // self.lr_decay_every)


# ------------------------- Reconstruction -------------------------------

class ReconstructionConfig(_Strict):
    lambda_r: float = Field(10.0, ge=0)
    # empty -> 10^-(n-1) for conv<n>
    lambdas: Dict[str, float] = Field(default_factory=dict)
    lr: float = Field(1.0, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    iters: int = Field(500, ge=1)
    init: Literal["gaussian", "from_image"] = "gaussian"
    init_image: Optional[str] = None
    target_layer: Optional[str] = None
    seed: int = 0


# ------------------------- Saliency -------------------------------

class SaliencySettings(_Strict):
    sigma_rel: float = Field(config.SIGMA_REL, ge=0)
    negative_cap: int = Field(config.NEGATIVE_CAP, ge=1)


# ------------------------- Run config -------------------------------

class RunConfig(_Strict):
    train: TrainHyperParams = Field(default_factory=TrainHyperParams)
    reconstruct: ReconstructionConfig = Field(default_factory=ReconstructionConfig)
    saliency: SaliencySettings = Field(default_factory=SaliencySettings)

    cnn: Optional[str] = None
    vlm_models: List[str] = Field(default_factory=list)
    corpus: Optional[str] = None
    output_dir: Optional[str] = None

    seed: int = config.SEED
    precision: Literal["float32", "float64"] = config.PRECISION  # type: ignore[assignment]
    jobs: int = Field(config.JOBS, ge=1)
    subtract_mean: bool = False
    post_relu: bool = False

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if not path:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            return cls.model_validate(json.loads(p.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from e
        except ValidationError as e:
            raise UsageError(f"config file {path} rejected: {e}") from e

    def merged(self, overrides: Dict[str, Any]) -> "RunConfig":
        """Apply CLI values (dotted keys such as 'train.lr'); None means 'not given'."""
        doc = self.model_dump()
        for key, value in overrides.items():
            if value is None:
                continue
            node = doc
            *parents, leaf = key.split(".")
            for part in parents:
                node = node[part]
            node[leaf] = value
        try:
            return RunConfig.model_validate(doc)
        except ValidationError as e:
            raise UsageError(f"invalid option value: {e}") from e

    def with_derived_seeds(self, explicit: Tuple[str, ...] = ()) -> "RunConfig":
        """Section seeds follow the global seed unless named in `explicit` ('train', 'reconstruct')."""
        update = {}
        for section in ("train", "reconstruct"):
            if section not in explicit:
                update[section] = getattr(self, section).model_copy(update={"seed": seeding.child_seed(self.seed, section)})
        return self.model_copy(update=update)

    def explicit_seeds(self) -> Tuple[str, ...]:
        return tuple(s for s in ("train", "reconstruct") if "seed" in getattr(self, s).model_fields_set)
