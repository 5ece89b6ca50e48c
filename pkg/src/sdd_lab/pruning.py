"""Masks, global-quantile magnitude pruning, structured l1 filter pruning,
post-prune perturbation modes, and the cumulative sparsity schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import Model, reinit_params

PRUNE_METHODS = ("magnitude_unstructured", "l1_structured")
PERTURBATIONS = ("rewind", "reinit", "none")


@dataclass
class PruneConfig:
    zeta: float
    zeta_wall: float
    method: str = "magnitude_unstructured"
    perturbation: str = "none"
    rewind_iteration: int = 0
    per_layer: bool = False  # pool the magnitude quantile per layer instead of globally

    def __post_init__(self):
        if not 0 < self.zeta < 1:
            raise ValueError("zeta must be in (0, 1)")
        if not 0 < self.zeta_wall <= 1:
            raise ValueError("zeta_wall must be in (0, 1]")
        if self.method not in PRUNE_METHODS:
            raise ValueError(f"unknown pruning method: {self.method!r}")
        if self.perturbation not in PERTURBATIONS:
            raise ValueError(f"unknown perturbation: {self.perturbation!r}")
        if self.rewind_iteration < 0:
            raise ValueError("rewind_iteration must be >= 0")


@dataclass
class Snapshot:
    """Copy of all parameter tensors captured `step` optimizer steps into the dense run."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def ordered_prunable(model: Model) -> list[str]:
    """Prunable parameter names in layer order (the tie-break order for pruning)."""
    return [f"{layer.name}.weight" for layer in model.layers
            if layer.kind in ("conv2d", "dense")]


def new_masks(model: Model) -> dict[str, np.ndarray]:
    dtype = next(iter(model.params.values())).data.dtype
    return {name: np.ones_like(model.params[name].data, dtype=dtype)
            for name in ordered_prunable(model)}


def sparsity_of(masks: dict[str, np.ndarray]) -> float:
    total = sum(m.size for m in masks.values())
    if total == 0:
        return 0.0
    zeros = sum(int((m == 0).sum()) for m in masks.values())
    return zeros / total


def advance_sparsity(zeta_current: float, zeta: float) -> float:
    if not 0 <= zeta_current < 1 or not 0 <= zeta < 1:
        raise ValueError("zeta_current and zeta must be in [0, 1)")
    return 1.0 - (1.0 - zeta_current) * (1.0 - zeta)


def _surviving_magnitudes(model: Model, masks: dict) -> tuple[np.ndarray, list]:
    """Pooled |w| over surviving weights plus (name, flat index) locators."""
    chunks, locators = [], []
    for name in ordered_prunable(model):
        mask_flat = masks[name].reshape(-1)
        idx = np.flatnonzero(mask_flat != 0)
        chunks.append(np.abs(model.params[name].data.reshape(-1)[idx]))
        locators.append((name, idx))
    if not chunks:
        raise ValueError("model has no prunable parameters")
    return np.concatenate(chunks), locators


def magnitude_threshold(model: Model, masks: dict, zeta: float) -> float:
    """The zeta-quantile of |w| over surviving prunable weights, pooled globally.

    Returned as the midpoint between the k-th and (k+1)-th smallest surviving
    magnitudes (k = floor(zeta * n)), so that exactly the k smallest fall at
    or below it when magnitudes are distinct.
    """
    if not 0 < zeta < 1:
        raise ValueError("zeta must be in (0, 1)")
    pooled, _ = _surviving_magnitudes(model, masks)
    if pooled.size == 0:
        raise ValueError("no surviving prunable weights")
    pooled = np.sort(pooled)
    k = int(zeta * pooled.size)
    if k == 0:
        return float(pooled[0]) / 2.0
    if k >= pooled.size:
        return float(pooled[-1])
    return float(pooled[k - 1] + pooled[k]) / 2.0


def _prune_count(zeta: float, surviving: int) -> int:
    return int(zeta * surviving)


def _magnitude_prune_pool(model: Model, masks: dict, zeta: float,
                          names_idx: list[tuple[str, np.ndarray]],
                          pooled: np.ndarray) -> None:
    k = _prune_count(zeta, pooled.size)
    if k == 0:
        return
    # stable sort: ties broken by (layer order, element index)
    order = np.argsort(pooled, kind="stable")[:k]
    offsets = np.cumsum([0] + [idx.size for _, idx in names_idx])
    for chunk, (name, idx) in enumerate(names_idx):
        lo, hi = offsets[chunk], offsets[chunk + 1]
        local = order[(order >= lo) & (order < hi)] - lo
        if local.size == 0:
            continue
        flat_positions = idx[local]
        mask_flat = masks[name].reshape(-1)
        mask_flat[flat_positions] = 0
        w_flat = model.params[name].data.reshape(-1)
        w_flat[flat_positions] = 0.0


def _structured_prune(model: Model, masks: dict, zeta: float) -> None:
    for layer in model.layers:
        if layer.kind != "conv2d":
            continue
        name = f"{layer.name}.weight"
        w = model.params[name].data
        mask = masks[name]
        filters = w.shape[0]
        alive = np.flatnonzero(mask.reshape(filters, -1).any(axis=1))
        k = _prune_count(zeta, alive.size)
        if k == 0:
            continue
        norms = np.abs(w[alive]).reshape(alive.size, -1).sum(axis=1)
        drop = alive[np.argsort(norms, kind="stable")[:k]]
        mask[drop] = 0
        w[drop] = 0.0


def apply_prune(model: Model, masks: dict, zeta: float,
                method: str = "magnitude_unstructured", per_layer: bool = False) -> dict:
    """Mask an additional floor(zeta * surviving) weights (or filters); zeroed in place."""
    if zeta >= 1:
        raise ValueError("zeta must be < 1")
    if zeta < 0:
        raise ValueError("zeta must be >= 0")
    if zeta == 0:
        return masks
    if method == "l1_structured":
        _structured_prune(model, masks, zeta)
        return masks
    if method != "magnitude_unstructured":
        raise ValueError(f"unknown pruning method: {method!r}")
    if per_layer:
        for name in ordered_prunable(model):
            mask_flat = masks[name].reshape(-1)
            idx = np.flatnonzero(mask_flat != 0)
            pooled = np.abs(model.params[name].data.reshape(-1)[idx])
            _magnitude_prune_pool(model, masks, zeta, [(name, idx)], pooled)
    else:
        pooled, locators = _surviving_magnitudes(model, masks)
        _magnitude_prune_pool(model, masks, zeta, locators, pooled)
    return masks


def apply_masks(model: Model, masks: dict) -> None:
    """Force masked weights to exactly 0.0; survivors are untouched bitwise."""
    for name, mask in masks.items():
        model.params[name].data *= mask


def perturb(model: Model, masks: dict, mode: str, snapshot: Snapshot | None = None,
            rng: np.random.Generator | None = None) -> Model:
    """Post-prune perturbation: rewind to the snapshot, fresh re-init, or nothing.

    Batchnorm running statistics reset under rewind/reinit and are kept
    under "none" (the weights are kept too).
    """
    if mode == "none":
        return model
    if mode == "rewind":
        if snapshot is None:
            raise ValueError("rewind perturbation requires a snapshot")
        for name, p in model.params.items():
            p.data[...] = snapshot.params[name]
    elif mode == "reinit":
        if rng is None:
            raise ValueError("reinit perturbation requires an rng")
        reinit_params(model, rng)
    else:
        raise ValueError(f"unknown perturbation: {mode!r}")
    apply_masks(model, masks)
    for state in model.bn_state.values():
        state.reset()
    return model
