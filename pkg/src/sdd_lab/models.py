"""Model zoo: the depth/width-parametrized VGG-like family and a small MLP.

A Model is an ordered layer list plus a flat parameter registry. Prunable
parameters are exactly the convolutional and fully-connected weight matrices;
biases and batchnorm parameters are never prunable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, parameter
from .layers import (
    BatchNormState,
    LayerSpec,
    adaptive_avg_pool,
    batchnorm2d,
    conv2d,
    dense,
    flatten,
    init_batchnorm,
    init_conv,
    init_dense,
    maxpool2x2,
)

VGG_POOL_OUTPUT = 7  # adaptive pooling target feeding the classifier


@dataclass
class VggSpec:
    """Depth delta in [1, 5]; group j uses 2**(width_exp + j - 1) filters."""

    depth: int
    width_exp: int
    in_channels: int = 3
    num_classes: int = 10

    def __post_init__(self):
        if not 1 <= self.depth <= 5:
            raise ValueError(f"depth must be in [1, 5], got {self.depth}")
        if self.width_exp < 3:
            raise ValueError(f"width_exp must be >= 3, got {self.width_exp}")


class Model:
    """Ordered layers + named parameters with per-parameter prunable flags."""

    def __init__(self, layers: list[LayerSpec], params: dict[str, Tensor],
                 prunable: set[str], bn_state: dict[str, BatchNormState]):
        self.layers = layers
        self.params = params
        self.prunable = prunable
        self.bn_state = bn_state

    def relu_layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers if layer.kind == "relu"]

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}


def _vgg_layers(spec: VggSpec) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    channels = spec.in_channels
    width = 0
    for group in range(1, spec.depth + 1):
        width = 2 ** (spec.width_exp + group - 1)
        for block in (1, 2):
            prefix = f"g{group}b{block}"
            layers.append(LayerSpec("conv2d", name=f"{prefix}.conv",
                                    in_channels=channels, out_channels=width))
            layers.append(LayerSpec("relu", name=f"{prefix}.relu"))
            layers.append(LayerSpec("batchnorm2d", name=f"{prefix}.bn", in_channels=width))
            channels = width
        if group < spec.depth:
            layers.append(LayerSpec("maxpool2x2", name=f"pool{group}"))
    layers.append(LayerSpec("adaptive_avg_pool", name="avgpool", output_size=VGG_POOL_OUTPUT))
    layers.append(LayerSpec("flatten", name="flatten"))
    layers.append(LayerSpec("dense", name="classifier",
                            in_features=width * VGG_POOL_OUTPUT ** 2,
                            out_features=spec.num_classes))
    return layers


def _mlp_layers(widths: list[int], in_features: int, num_classes: int) -> list[LayerSpec]:
    layers = [LayerSpec("flatten", name="flatten")]
    prev = in_features
    for i, width in enumerate(widths, start=1):
        layers.append(LayerSpec("dense", name=f"fc{i}", in_features=prev, out_features=width))
        layers.append(LayerSpec("relu", name=f"fc{i}.relu"))
        prev = width
    layers.append(LayerSpec("dense", name="classifier", in_features=prev, out_features=num_classes))
    return layers


def _materialize(layers: list[LayerSpec], rng: np.random.Generator, dtype) -> Model:
    params: dict[str, Tensor] = {}
    prunable: set[str] = set()
    bn_state: dict[str, BatchNormState] = {}
    for layer in layers:
        if layer.kind == "dense":
            w, b = init_dense(layer.in_features, layer.out_features, rng, dtype)
            params[f"{layer.name}.weight"] = parameter(w)
            params[f"{layer.name}.bias"] = parameter(b)
            prunable.add(f"{layer.name}.weight")
        elif layer.kind == "conv2d":
            w, b = init_conv(layer.in_channels, layer.out_channels, rng, dtype)
            params[f"{layer.name}.weight"] = parameter(w)
            params[f"{layer.name}.bias"] = parameter(b)
            prunable.add(f"{layer.name}.weight")
        elif layer.kind == "batchnorm2d":
            gamma, beta = init_batchnorm(layer.in_channels, dtype)
            params[f"{layer.name}.gamma"] = parameter(gamma)
            params[f"{layer.name}.beta"] = parameter(beta)
            bn_state[layer.name] = BatchNormState(layer.in_channels, dtype)
    return Model(layers, params, prunable, bn_state)


def build_vgg(spec: VggSpec, rng: np.random.Generator, dtype=np.float32) -> Model:
    """Generate the VGG-like family member for (depth, width_exp)."""
    return _materialize(_vgg_layers(spec), rng, dtype)


def build_mlp(widths: list[int], in_features: int, num_classes: int,
              rng: np.random.Generator, dtype=np.float32) -> Model:
    """Alternating dense/relu stack ending in a dense classifier."""
    if not widths:
        raise ValueError("widths must be non-empty")
    if any(w < 1 for w in widths):
        raise ValueError("all widths must be >= 1")
    return _materialize(_mlp_layers(list(widths), in_features, num_classes), rng, dtype)


def reinit_params(model: Model, rng: np.random.Generator) -> None:
    """Redraw every parameter from the init distribution, in place."""
    dtype = next(iter(model.params.values())).data.dtype
    for layer in model.layers:
        if layer.kind == "dense":
            w, b = init_dense(layer.in_features, layer.out_features, rng, dtype)
            model.params[f"{layer.name}.weight"].data[...] = w
            model.params[f"{layer.name}.bias"].data[...] = b
        elif layer.kind == "conv2d":
            w, b = init_conv(layer.in_channels, layer.out_channels, rng, dtype)
            model.params[f"{layer.name}.weight"].data[...] = w
            model.params[f"{layer.name}.bias"].data[...] = b
        elif layer.kind == "batchnorm2d":
            gamma, beta = init_batchnorm(layer.in_channels, dtype)
            model.params[f"{layer.name}.gamma"].data[...] = gamma
            model.params[f"{layer.name}.beta"].data[...] = beta


def forward(model: Model, batch, mode: str = "eval", capture: dict | None = None) -> Tensor:
    """Run the layer stack; returns logits (batch x num_classes).

    When `capture` is given, post-activation arrays of every relu layer are
    stored into it under the layer name (detached copies of the data).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode: {mode!r}")
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch))
    for layer in model.layers:
        if layer.kind == "dense":
            x = dense(x, model.params[f"{layer.name}.weight"], model.params[f"{layer.name}.bias"])
        elif layer.kind == "conv2d":
            x = conv2d(x, model.params[f"{layer.name}.weight"], model.params[f"{layer.name}.bias"])
        elif layer.kind == "relu":
            x = x.relu()
            if capture is not None:
                capture[layer.name] = x.data
        elif layer.kind == "batchnorm2d":
            x = batchnorm2d(x, model.params[f"{layer.name}.gamma"],
                            model.params[f"{layer.name}.beta"],
                            model.bn_state[layer.name], mode)
        elif layer.kind == "maxpool2x2":
            x = maxpool2x2(x)
        elif layer.kind == "adaptive_avg_pool":
            x = adaptive_avg_pool(x, layer.output_size)
        elif layer.kind == "flatten":
            x = flatten(x)
    return x


def count_params(model: Model, prunable_only: bool = False) -> int:
    total = 0
    for name, p in model.params.items():
        if prunable_only and name not in model.prunable:
            continue
        total += p.data.size
    return total


def copy_params(model: Model) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.params.items()}


def load_params(model: Model, values: dict[str, np.ndarray]) -> None:
    for name, arr in values.items():
        model.params[name].data[...] = arr
