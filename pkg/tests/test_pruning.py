import numpy as np
import pytest

from sdd_lab.models import VggSpec, build_mlp, build_vgg, copy_params, forward
from sdd_lab.pruning import (
    PruneConfig,
    Snapshot,
    advance_sparsity,
    apply_prune,
    magnitude_threshold,
    new_masks,
    ordered_prunable,
    perturb,
    sparsity_of,
)

RNG = lambda s=0: np.random.default_rng(s)


def _set_weights(model, name, values):
    model.params[name].data[...] = np.asarray(values, dtype=np.float32).reshape(
        model.params[name].data.shape)


def sort_oracle(model, masks, zeta):
    """Independent pruning oracle: explicit python sort of surviving weights
    by (|w|, layer order, element order); returns the set of pruned positions."""
    entries = []
    for li, name in enumerate(ordered_prunable(model)):
        w = model.params[name].data.reshape(-1)
        m = masks[name].reshape(-1)
        for ei in range(w.size):
            if m[ei] != 0:
                entries.append((abs(float(w[ei])), li, ei, name))
    entries.sort(key=lambda t: (t[0], t[1], t[2]))
    k = int(zeta * len(entries))
    return {(name, ei) for _, _, ei, name in entries[:k]}


def test_prune_config_validation():
    with pytest.raises(ValueError):
        PruneConfig(zeta=0.0, zeta_wall=0.5)
    with pytest.raises(ValueError):
        PruneConfig(zeta=0.2, zeta_wall=0.0)
    with pytest.raises(ValueError):
        PruneConfig(zeta=0.2, zeta_wall=0.5, method="random")
    with pytest.raises(ValueError):
        PruneConfig(zeta=0.2, zeta_wall=0.5, perturbation="shake")


def test_threshold_prunes_exactly_the_lower_half():
    model = build_mlp([4], 1, 1, RNG())  # fc1.weight has 4 entries
    _set_weights(model, "fc1.weight", [0.1, -0.2, 0.3, -0.5])
    _set_weights(model, "classifier.weight", [9.0, 9.0, 9.0, 9.0])
    masks = new_masks(model)
    theta = magnitude_threshold(model, masks, 0.5)
    w = np.abs(np.concatenate([model.params[n].data.reshape(-1)
                               for n in ordered_prunable(model)]))
    assert (w <= theta).sum() == 4  # global pooling: all of fc1 falls below
    apply_prune(model, masks, 0.5)
    assert masks["fc1.weight"].sum() == 0
    assert masks["classifier.weight"].sum() == 4


def test_threshold_simple_quantile_example():
    # surviving magnitudes {0.1, 0.2, 0.3, 0.5}, zeta=0.5 -> theta separates {0.1, 0.2}
    model = build_mlp([4], 1, 1, RNG())
    _set_weights(model, "fc1.weight", [0.1, -0.2, 0.3, -0.5])
    masks = new_masks(model)
    masks["classifier.weight"][...] = 0  # only fc1 survives
    theta = magnitude_threshold(model, masks, 0.5)
    assert 0.2 < theta < 0.3
    apply_prune(model, masks, 0.5)
    surviving = np.abs(model.params["fc1.weight"].data.reshape(-1)[
        masks["fc1.weight"].reshape(-1) == 1])
    assert sorted(surviving.tolist()) == pytest.approx([0.3, 0.5])


def test_threshold_below_minimum_for_tiny_zeta():
    model = build_mlp([4], 1, 1, RNG())
    _set_weights(model, "fc1.weight", [0.4, -0.2, 0.3, -0.5])
    _set_weights(model, "classifier.weight", [1.0, 1.0, 0.9, 0.8])
    masks = new_masks(model)
    theta = magnitude_threshold(model, masks, 0.01)
    assert theta < 0.2
    apply_prune(model, masks, 0.01)
    assert sparsity_of(masks) == 0.0  # floor(0.01 * 8) = 0: nothing pruned


def test_all_equal_magnitudes_tie_break_is_stable():
    model = build_mlp([8], 1, 1, RNG())
    _set_weights(model, "fc1.weight", [0.5] * 8)
    _set_weights(model, "classifier.weight", [0.5] * 8)
    masks = new_masks(model)
    apply_prune(model, masks, 0.5)
    # exactly floor(0.5*16) = 8 pruned, and they are the first 8 in layer order
    assert masks["fc1.weight"].sum() == 0
    assert masks["classifier.weight"].sum() == 8


def _pruned_positions(model, masks):
    out = set()
    for name in ordered_prunable(model):
        for ei in np.flatnonzero(masks[name].reshape(-1) == 0):
            out.add((name, int(ei)))
    return out


@pytest.mark.parametrize("seed", range(5))
def test_apply_prune_matches_sort_oracle(seed):
    rng = RNG(seed)
    model = build_mlp([13, 7], 11, 5, rng)
    masks = new_masks(model)
    apply_prune(model, masks, 0.35)  # first round
    after_first = _pruned_positions(model, masks)
    expected_second = sort_oracle(model, masks, 0.5)
    apply_prune(model, masks, 0.5)  # second round, checked against the oracle
    assert _pruned_positions(model, masks) == after_first | expected_second
    for name in ordered_prunable(model):
        flat_mask = masks[name].reshape(-1)
        flat_w = model.params[name].data.reshape(-1)
        assert np.all(flat_w[flat_mask == 0] == 0.0)  # masked weights are zeroed


def test_two_rounds_of_02_prune_36_percent():
    model = build_mlp([10], 9, 10, RNG(1))  # 90 + 100 = 190 prunable... use exact 100
    model = build_mlp([10], 9, 1, RNG(1))  # 90 + 10 = 100 prunable weights
    masks = new_masks(model)
    apply_prune(model, masks, 0.2)
    apply_prune(model, masks, 0.2)
    zeros = sum(int((m == 0).sum()) for m in masks.values())
    assert zeros == 36  # 1 - 0.8**2 of 100


def test_prune_zeta_zero_is_identity():
    model = build_mlp([6], 4, 2, RNG(2))
    masks = new_masks(model)
    before = {k: v.copy() for k, v in masks.items()}
    apply_prune(model, masks, 0.0)
    for k in masks:
        assert np.array_equal(masks[k], before[k])


def test_prune_zeta_one_rejected():
    model = build_mlp([6], 4, 2, RNG(3))
    with pytest.raises(ValueError):
        apply_prune(model, new_masks(model), 1.0)


def test_per_layer_pooling_flag():
    model = build_mlp([4], 4, 4, RNG(4))
    _set_weights(model, "fc1.weight", np.full(16, 0.01))
    _set_weights(model, "classifier.weight", np.full(16, 1.0))
    masks = new_masks(model)
    apply_prune(model, masks, 0.5, per_layer=True)
    # each layer loses half, despite fc1 being uniformly smaller
    assert masks["fc1.weight"].sum() == 8
    assert masks["classifier.weight"].sum() == 8
    model2 = build_mlp([4], 4, 4, RNG(4))
    _set_weights(model2, "fc1.weight", np.full(16, 0.01))
    _set_weights(model2, "classifier.weight", np.full(16, 1.0))
    masks2 = new_masks(model2)
    apply_prune(model2, masks2, 0.5, per_layer=False)
    assert masks2["fc1.weight"].sum() == 0  # global pooling removes all small ones


def test_structured_halves_filters_repeatedly():
    rng = RNG(5)
    model = build_vgg(VggSpec(1, 5, in_channels=1, num_classes=2), rng)
    masks = new_masks(model)
    name = "g1b1.conv.weight"
    expected = [16, 8, 4, 2]  # 32 filters halved per round
    for want in expected:
        apply_prune(model, masks, 0.5, method="l1_structured")
        alive = int(masks[name].reshape(32, -1).any(axis=1).sum())
        assert alive == want
        # whole filters are masked, never partial
        per_filter = masks[name].reshape(32, -1)
        assert set(np.unique(per_filter.max(axis=1) - per_filter.min(axis=1))) == {0.0}


def test_structured_and_magnitude_agree_on_zero_filter():
    rng = RNG(6)
    for method in ("l1_structured", "magnitude_unstructured"):
        model = build_vgg(VggSpec(1, 3, in_channels=1, num_classes=2), rng)
        name = "g1b1.conv.weight"
        model.params[name].data[3] = 0.0  # one all-zero filter (1*3*3 = 9 weights)
        model.params[name].data[~(np.arange(8) == 3)] += 1.0  # others clearly nonzero
        model.params["g1b2.conv.weight"].data[...] += 1.0
        model.params["classifier.weight"].data[...] += 1.0
        masks = new_masks(model)
        total = sum(model.params[n].data.size for n in ordered_prunable(model))
        frac = 1 / 8 if method == "l1_structured" else 9 / total
        apply_prune(model, masks, frac + 1e-9, method=method)
        filter_mask = masks[name].reshape(8, -1)
        assert filter_mask[3].max() == 0.0  # the zero filter went first
        assert filter_mask[np.arange(8) != 3].min() == 1.0


def test_structured_leaves_dense_untouched():
    model = build_vgg(VggSpec(1, 3, in_channels=1, num_classes=2), RNG(7))
    masks = new_masks(model)
    apply_prune(model, masks, 0.5, method="l1_structured")
    assert masks["classifier.weight"].min() == 1.0


def test_advance_sparsity_examples():
    assert advance_sparsity(0.2, 0.2) == pytest.approx(0.36)
    assert advance_sparsity(0.37, 0.0) == 0.37
    z = 0.0
    for _ in range(10):
        z = advance_sparsity(z, 0.2)
    assert z == pytest.approx(1 - 0.8 ** 10)
    with pytest.raises(ValueError):
        advance_sparsity(1.0, 0.2)


def test_sparsity_of_examples():
    ones, zeros = np.ones(64), np.zeros(36)
    assert sparsity_of({"a": ones}) == 0.0
    assert sparsity_of({"a": np.zeros(10)}) == 1.0
    assert sparsity_of({"a": ones, "b": zeros}) == 0.36


def test_mask_monotonicity_over_random_rounds():
    rng = RNG(8)
    model = build_mlp([20, 20], 10, 4, rng)
    masks = new_masks(model)
    prev = {k: v.copy() for k, v in masks.items()}
    for zeta in (0.1, 0.35, 0.2, 0.5, 0.15):
        apply_prune(model, masks, zeta)
        for k in masks:
            assert np.all(masks[k] <= prev[k])  # support only shrinks
        prev = {k: v.copy() for k, v in masks.items()}


def test_biases_and_bn_never_masked():
    model = build_vgg(VggSpec(1, 3, in_channels=1, num_classes=2), RNG(9))
    masks = new_masks(model)
    for _ in range(5):
        apply_prune(model, masks, 0.3)
    assert all(name.endswith(".weight") for name in masks)
    for name in model.params:
        if name.endswith((".bias", ".gamma", ".beta")):
            assert name not in masks


def test_perturb_none_is_exact_noop():
    rng = RNG(10)
    model = build_vgg(VggSpec(1, 3, in_channels=1, num_classes=2), rng)
    forward(model, rng.random((2, 1, 8, 8), dtype=np.float32), mode="train")
    masks = new_masks(model)
    apply_prune(model, masks, 0.4)
    before = copy_params(model)
    rm_before = {k: v.running_mean.copy() for k, v in model.bn_state.items()}
    perturb(model, masks, "none")
    for k in before:
        assert np.array_equal(model.params[k].data, before[k])
    for k, state in model.bn_state.items():
        assert np.array_equal(state.running_mean, rm_before[k])
        assert state.batches_seen == 1  # kept under "none"


def test_perturb_rewind_restores_survivors_bitwise():
    rng = RNG(11)
    model = build_mlp([16], 8, 3, rng)
    snapshot = Snapshot(params=copy_params(model), step=0)
    for p in model.params.values():  # simulate training drift
        p.data += rng.standard_normal(p.data.shape).astype(p.data.dtype)
    masks = new_masks(model)
    apply_prune(model, masks, 0.5)
    perturb(model, masks, "rewind", snapshot=snapshot)
    for name, p in model.params.items():
        if name in masks:
            m = masks[name]
            assert np.array_equal(p.data[m == 1], snapshot.params[name][m == 1])
            assert np.all(p.data[m == 0] == 0.0)
        else:
            assert np.array_equal(p.data, snapshot.params[name])


def test_perturb_rewind_requires_snapshot():
    model = build_mlp([4], 2, 2, RNG(12))
    with pytest.raises(ValueError):
        perturb(model, new_masks(model), "rewind")


def test_perturb_reinit_is_seed_deterministic():
    def run():
        model = build_mlp([16], 8, 3, RNG(13))
        masks = new_masks(model)
        apply_prune(model, masks, 0.5)
        perturb(model, masks, "reinit", rng=np.random.default_rng(77))
        return copy_params(model), masks

    a, masks_a = run()
    b, _ = run()
    for k in a:
        assert np.array_equal(a[k], b[k])
    for name, m in masks_a.items():
        assert np.all(a[name][m == 0] == 0.0)


def test_perturb_resets_bn_under_rewind_and_reinit():
    rng = RNG(14)
    for mode in ("rewind", "reinit"):
        model = build_vgg(VggSpec(1, 3, in_channels=1, num_classes=2), rng)
        snapshot = Snapshot(params=copy_params(model), step=0)
        forward(model, rng.random((2, 1, 8, 8), dtype=np.float32), mode="train")
        assert model.bn_state["g1b1.bn"].batches_seen == 1
        perturb(model, new_masks(model), mode, snapshot=snapshot,
                rng=np.random.default_rng(5))
        assert model.bn_state["g1b1.bn"].batches_seen == 0
