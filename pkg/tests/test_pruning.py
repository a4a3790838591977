"""Channel scoring, mask selection/expansion, and frozen-zero training tests."""

from __future__ import annotations

import numpy as np
import pytest

from fedlps import accounting, engine
from fedlps.engine import (
    avgpool,
    batchnorm,
    conv2d,
    cross_entropy,
    flatten,
    forward,
    init_params,
    linear,
    maxpool,
    relu,
    sgd_step,
)
from fedlps.errors import ConfigurationError, StructuralError, UsageError
from fedlps.model import Predictor
from fedlps.pruning import (
    apply_mask,
    build_mask,
    channel_importance,
    effective_counts,
    expand_elements,
    mask_gradients,
    select_channels,
)
from fedlps.util import rng_for


def desk_predictor(seed: int = 60) -> Predictor:
    """Head stack used by the default experiment: one prunable conv + exempt head."""
    layers = (maxpool("pool1", 2), conv2d("conv2", 8, 20, 3, padding=1),
              batchnorm("bn2", 20), relu("relu2"), avgpool("pool2", 14),
              flatten("flat"), linear("head", 20, 10))
    params = init_params(layers, rng_for(seed, "desk-pred"))
    return Predictor(layers, params, task=0, input_shape=(8, 28, 28))


def nonzero_predictor(seed: int = 64) -> Predictor:
    """Desk predictor with every parameter strictly nonzero (default init zeroes
    biases/shifts, which would blur exact zero-set comparisons)."""
    pred = desk_predictor(seed=seed)
    rng = rng_for(seed, "nonzero")
    params = {k: rng.uniform(0.5, 1.5, size=v.shape) for k, v in pred.params.items()}
    return Predictor(pred.layers, params, pred.task, pred.input_shape)


def toy_predictor(seed: int = 61) -> Predictor:
    layers = (conv2d("ca", 3, 6, 2), relu("r"), conv2d("cb", 6, 4, 2),
              flatten("f"), linear("out", 4 * 2 * 2, 3))
    params = init_params(layers, rng_for(seed, "toy-pred"))
    return Predictor(layers, params, task=1, input_shape=(3, 4, 4))


class TestChannelImportance:
    def test_l1_of_zero_and_one_filters(self):
        layers = (conv2d("c", 1, 2, 3, bias=False), flatten("f"), linear("o", 2 * 2 * 2, 2))
        params = init_params(layers, rng_for(62))
        params["c.weight"] = np.stack([np.zeros((1, 3, 3)), np.ones((1, 3, 3))])
        pred = Predictor(layers, params, task=0, input_shape=(1, 4, 4))
        scores = channel_importance(pred)
        np.testing.assert_array_equal(scores.scores["c"], [0.0, 9.0])

    def test_negation_invariance(self):
        pred = toy_predictor()
        before = channel_importance(pred)
        flipped = Predictor(pred.layers, {k: -v for k, v in pred.params.items()},
                            pred.task, pred.input_shape)
        after = channel_importance(flipped)
        for name in before.scores:
            np.testing.assert_array_equal(before.scores[name], after.scores[name])

    def test_matches_bruteforce_abs_sum(self):
        rng = rng_for(63, "oracle")
        pred = toy_predictor()
        scores = channel_importance(pred)
        for layer in pred.layers:
            if layer.kind not in ("conv2d", "linear"):
                continue
            w = pred.params[f"{layer.name}.weight"]
            expected = []
            for c in range(w.shape[0]):
                total = 0.0
                for value in w[c].reshape(-1):
                    total += abs(float(value))
                expected.append(total)
            np.testing.assert_allclose(scores.scores[layer.name], expected, rtol=1e-12)

    def test_unaffected_by_nontrainable_layers(self):
        pred = toy_predictor()
        stripped = Predictor(
            tuple(l for l in pred.layers if l.kind in ("conv2d", "linear", "flatten")),
            dict(pred.params), pred.task, pred.input_shape)
        a = channel_importance(pred).scores
        b = channel_importance(stripped).scores
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])


class TestSelectChannels:
    def test_two_smallest_with_index_tiebreak(self):
        scores = np.array([3, 1, 4, 1, 5, 9, 2, 6, 5, 3], dtype=float)
        keep = select_channels(scores, 0.2)
        assert keep.sum() == 8
        assert keep[1] == 0 and keep[3] == 0  # the two score-1 channels

    def test_tie_prunes_lowest_index_first(self):
        keep = select_channels(np.array([1.0, 1.0, 1.0, 1.0]), 0.5)
        np.testing.assert_array_equal(keep, [0, 0, 1, 1])

    def test_zero_ratio_keeps_all(self):
        keep = select_channels(np.arange(7, dtype=float), 0.0)
        np.testing.assert_array_equal(keep, np.ones(7))

    def test_floor_arithmetic_leaves_one(self):
        keep = select_channels(np.arange(5, dtype=float), 0.8)
        assert keep.sum() == 1

    def test_ratio_bounds(self):
        with pytest.raises(ConfigurationError):
            select_channels(np.ones(4), 1.0)
        with pytest.raises(ConfigurationError):
            select_channels(np.ones(4), -0.1)


class TestBuildMask:
    def test_final_prunable_layer_exempt(self):
        pred = desk_predictor()
        mask = build_mask(channel_importance(pred), 0.8, client=0, task=0)
        assert mask.exempt == ("head",)
        np.testing.assert_array_equal(mask.channel_keep["head"], np.ones(10))
        assert mask.channel_keep["conv2"].sum() == 4  # 20 - floor(0.8*20)

    def test_kept_count_formula(self):
        pred = desk_predictor()
        scores = channel_importance(pred)
        for rho in (0.0, 0.2, 0.4, 0.6, 0.8):
            mask = build_mask(scores, rho, client=0, task=0)
            assert mask.channel_keep["conv2"].sum() == 20 - int(np.floor(rho * 20))

    def test_same_scores_give_bit_identical_masks(self):
        pred = desk_predictor()
        scores = channel_importance(pred)
        a = build_mask(scores, 0.4, client=3, task=0)
        b = build_mask(scores, 0.4, client=3, task=0)
        assert a.digest_equal(b)
        for key in a.elements:
            assert a.elements[key].tobytes() == b.elements[key].tobytes()

    def test_expansion_covers_bias_and_norm(self):
        pred = desk_predictor()
        mask = build_mask(channel_importance(pred), 0.4, client=0, task=0)
        dropped = np.flatnonzero(mask.channel_keep["conv2"] == 0)
        w = mask.elements["conv2.weight"]
        assert not w[dropped].any()
        assert not mask.elements["conv2.bias"][dropped].any()
        assert not mask.elements["bn2.scale"][dropped].any()
        assert not mask.elements["bn2.shift"][dropped].any()

    def test_expansion_through_flatten_blocks_head_columns(self):
        # Channels surviving a (C, H, W) flatten occupy contiguous feature blocks.
        layers = (conv2d("c", 1, 3, 3, padding=1), flatten("f"), linear("head", 3 * 4 * 4, 2))
        keep = {"c": np.array([1, 0, 1], dtype=np.uint8),
                "head": np.ones(2, dtype=np.uint8)}
        elements = expand_elements(layers, (1, 4, 4), keep)
        head_mask = elements["head.weight"]
        block = 4 * 4
        np.testing.assert_array_equal(head_mask[:, 0 * block:1 * block], 1.0)
        np.testing.assert_array_equal(head_mask[:, 1 * block:2 * block], 0.0)
        np.testing.assert_array_equal(head_mask[:, 2 * block:3 * block], 1.0)


class TestApplyMask:
    def test_elementwise_product(self):
        layers = (linear("w", 3, 1, bias=False), linear("head", 1, 1))
        params = {"w.weight": np.array([[1.5, -2.0, 3.0]]),
                  "head.weight": np.ones((1, 1)), "head.bias": np.zeros(1)}
        pred = Predictor(layers, params, task=0, input_shape=(3,))
        mask = build_mask(channel_importance(pred), 0.0, client=0, task=0)
        mask.elements["w.weight"][:] = [[1.0, 0.0, 1.0]]
        out = apply_mask(pred, mask)
        np.testing.assert_array_equal(out.params["w.weight"], [[1.5, 0.0, 3.0]])

    def test_idempotent(self):
        pred = desk_predictor()
        mask = build_mask(channel_importance(pred), 0.6, client=0, task=0)
        once = apply_mask(pred, mask)
        twice = apply_mask(once, mask)
        for key in once.params:
            assert once.params[key].tobytes() == twice.params[key].tobytes()

    def test_zero_set_matches_mask_exactly(self):
        pred = nonzero_predictor(seed=64)
        mask = build_mask(channel_importance(pred), 0.4, client=0, task=0)
        out = apply_mask(pred, mask)
        for key, m in mask.elements.items():
            np.testing.assert_array_equal(out.params[key] == 0.0, m == 0.0,
                                          err_msg=key)

    def test_kept_positions_bit_unchanged(self):
        pred = desk_predictor(seed=65)
        mask = build_mask(channel_importance(pred), 0.4, client=0, task=0)
        out = apply_mask(pred, mask)
        for key, m in mask.elements.items():
            kept = m == 1.0
            assert (out.params[key][kept] == pred.params[key][kept]).all()

    def test_owner_mismatch_rejected(self):
        pred = desk_predictor()
        mask = build_mask(channel_importance(pred), 0.2, client=0, task=5)
        with pytest.raises(UsageError, match="task"):
            apply_mask(pred, mask)

    def test_shape_mismatch_is_structural(self):
        pred = desk_predictor()
        mask = build_mask(channel_importance(pred), 0.2, client=0, task=0)
        bad = {k: (v[:1] if k == "conv2.weight" else v) for k, v in mask.elements.items()}
        object.__setattr__(mask, "elements", bad)
        with pytest.raises(StructuralError):
            apply_mask(pred, mask)

    def test_desk_reduction_tracks_ratio(self):
        pred = nonzero_predictor(seed=68)
        scores = channel_importance(pred)
        dense = sum(v.size for v in pred.params.values())
        for rho in (0.2, 0.4, 0.6, 0.8):
            mask = build_mask(scores, rho, client=0, task=0)
            nonzero = sum(int(np.count_nonzero(p)) for p in apply_mask(pred, mask).params.values())
            reduction = (dense - nonzero) / dense
            assert abs(reduction - rho) <= 0.02, (rho, reduction)


class TestFrozenZero:
    def test_masked_positions_stay_zero_through_sgd(self):
        pred = desk_predictor(seed=66)
        mask = build_mask(channel_importance(pred), 0.6, client=0, task=0)
        working = apply_mask(pred, mask)
        rng = rng_for(67, "frozen")
        batch = rng.normal(size=(8, 8, 28, 28))
        labels = rng.integers(0, 10, size=8)
        params = working.params
        for _ in range(3):
            logits, tape = forward(working.layers, params, batch)
            _, dlogits = cross_entropy(logits, labels)
            grads = mask_gradients(engine.backward(tape, dlogits), mask)
            params = sgd_step(params, grads, lr=0.05, weight_decay=0.001)
        for key, m in mask.elements.items():
            assert not params[key][m == 0.0].any(), key

    def test_unmasked_gradients_pass_through(self):
        pred = desk_predictor()
        mask = build_mask(channel_importance(pred), 0.0, client=0, task=0)
        grads = {k: np.ones_like(v) for k, v in pred.params.items()}
        out = mask_gradients(grads, mask)
        for key in grads:
            np.testing.assert_array_equal(out[key], grads[key])


def structural_param_oracle(layers, input_shape, channel_keep) -> int:
    """Index-by-index enumeration of parameters kept under a channel decision."""
    def keep_vec(name, count):
        if name in channel_keep:
            return [bool(b) for b in channel_keep[name]]
        return [True] * count

    shape = tuple(input_shape)
    in_keep = [True] * shape[0]
    total = 0
    for layer in layers:
        if layer.kind == "conv2d":
            out_keep = keep_vec(layer.name, layer.out_channels)
            for o in range(layer.out_channels):
                for i in range(layer.in_channels):
                    for _ in range(layer.kernel_size ** 2):
                        if out_keep[o] and in_keep[i]:
                            total += 1
                if layer.bias and out_keep[o]:
                    total += 1
            in_keep = out_keep
        elif layer.kind == "linear":
            out_keep = keep_vec(layer.name, layer.out_features)
            for o in range(layer.out_features):
                for i in range(layer.in_features):
                    if out_keep[o] and in_keep[i]:
                        total += 1
                if layer.bias and out_keep[o]:
                    total += 1
            in_keep = out_keep
        elif layer.kind == "batchnorm":
            total += 2 * sum(in_keep)
        elif layer.kind == "flatten":
            per = 1
            for d in shape[1:]:
                per *= d
            in_keep = [k for k in in_keep for _ in range(per)]
        shape = engine.output_shape(layer, shape)
    return total


class TestEffectiveCounts:
    def test_zero_ratio_equals_unpruned(self):
        pred = desk_predictor()
        mask = build_mask(channel_importance(pred), 0.0, client=0, task=0)
        params, flops = effective_counts(pred, mask)
        assert params == sum(v.size for v in pred.params.values())
        assert flops == accounting.count_flops(pred.layers, pred.input_shape)

    def test_stacked_convs_match_index_walk_oracle(self):
        pred = toy_predictor()
        scores = channel_importance(pred)
        for rho in (0.2, 0.5, 0.8):
            mask = build_mask(scores, rho, client=0, task=1)
            params, _ = effective_counts(pred, mask)
            oracle = structural_param_oracle(pred.layers, pred.input_shape, mask.channel_keep)
            assert params == oracle, rho

    def test_counts_equal_transmitted_nonzeros(self):
        # Structural counting and element-mask counting are independent routes
        # to the same number; they must agree exactly.
        for seed, rho in ((70, 0.2), (71, 0.4), (72, 0.6), (73, 0.8)):
            pred = desk_predictor(seed=seed)
            mask = build_mask(channel_importance(pred), rho, client=0, task=0)
            params, _ = effective_counts(pred, mask)
            assert params == mask.transmitted_params(), (seed, rho)

    def test_flops_shrink_with_ratio(self):
        pred = desk_predictor()
        scores = channel_importance(pred)
        flops = [effective_counts(pred, build_mask(scores, rho, client=0, task=0))[1]
                 for rho in (0.0, 0.2, 0.4, 0.6, 0.8)]
        assert flops == sorted(flops, reverse=True)
        assert len(set(flops)) == len(flops)
