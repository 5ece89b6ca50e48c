"""Activation-state entropy probe.

Each ReLU unit is treated as a two-state system (positive vs non-positive)
and its empirical state entropy is estimated over a dataset. For conv
layers a "neuron" is an output channel, with observations pooled over both
samples and spatial positions (a per-position mode exists behind a flag).
Probing runs in eval mode so the report is a pure function of
(weights, dataset).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import Model, forward


@dataclass
class EntropyReport:
    per_layer: dict[str, float] = field(default_factory=dict)
    average: float = 0.0
    sample_count: int = 0
    base: str = "bits"


def neuron_states(activation: np.ndarray) -> np.ndarray:
    """Binary states: 1 where the activation is strictly positive, else 0.

    Exact zeros count as the non-positive state, so fully-pruned units are
    zero-entropy.
    """
    return (np.asarray(activation) > 0).astype(np.uint8)


def _binary_entropy(p: np.ndarray, base: str) -> np.ndarray:
    p = np.clip(p, 0.0, 1.0)
    log = np.log2 if base == "bits" else np.log
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * log(p), 0.0) - np.where(p < 1, (1 - p) * log(1 - p), 0.0)
    return h


def layer_entropy(states: np.ndarray, base: str = "bits", per_position: bool = False) -> float:
    """Mean per-neuron state entropy for one layer's states over a dataset.

    `states` is (samples, units) for dense activations or
    (samples, channels, H, W) for conv activations.
    """
    states = np.asarray(states)
    if states.size == 0:
        raise ValueError("empty dataset")
    if states.ndim == 2:
        p = states.mean(axis=0, dtype=np.float64)
    elif states.ndim == 4:
        if per_position:
            p = states.mean(axis=0, dtype=np.float64).reshape(-1)
        else:
            p = states.mean(axis=(0, 2, 3), dtype=np.float64)
    else:
        raise ValueError(f"unsupported state shape {states.shape}")
    return float(_binary_entropy(p, base).mean())


def model_entropy(model: Model, images: np.ndarray, batch_size: int = 256,
                  base: str = "bits", per_position: bool = False) -> EntropyReport:
    """Per-ReLU-layer entropies over a dataset, plus their unweighted mean."""
    if base not in ("bits", "nats"):
        raise ValueError(f"unknown base: {base!r}")
    relu_names = model.relu_layer_names()
    if not relu_names:
        raise ValueError("model has no relu layers to probe")
    n = len(images)
    if n == 0:
        raise ValueError("empty dataset")

    positives: dict[str, np.ndarray] = {}
    observations: dict[str, int] = {}
    for start in range(0, n, batch_size):
        batch = images[start:start + batch_size]
        capture: dict[str, np.ndarray] = {}
        forward(model, batch, mode="eval", capture=capture)
        for name in relu_names:
            act = capture[name]
            states = act > 0
            if act.ndim == 4 and not per_position:
                counts = states.sum(axis=(0, 2, 3), dtype=np.int64)
                obs = states.shape[0] * states.shape[2] * states.shape[3]
            else:
                counts = states.reshape(states.shape[0], -1).sum(axis=0, dtype=np.int64)
                obs = states.shape[0]
            if name not in positives:
                positives[name] = counts
                observations[name] = obs
            else:
                positives[name] += counts
                observations[name] += obs

    per_layer = {}
    for name in relu_names:
        p = positives[name] / observations[name]
        per_layer[name] = float(_binary_entropy(p, base).mean())
    average = float(np.mean(list(per_layer.values())))
    return EntropyReport(per_layer=per_layer, average=average, sample_count=n, base=base)
