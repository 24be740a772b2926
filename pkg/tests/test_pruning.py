"""Zeroed-channel detection, prune planning, reconfiguration, revival."""

import json

import numpy as np
import pytest

from sparsetrain import costs
from sparsetrain.checkpoint import RunState
from sparsetrain.errors import ConsistencyError
from sparsetrain.graph import (build_toy_resnet, build_toy_vgg, forward,
                               validate_graph, channel_classes,
                               _first_conv_of_path, _last_conv_of_path)
from sparsetrain.pruning import (ChannelMask, SparsityHistory,
                                 apply_reconfiguration, detect_zeroed_channels,
                                 masks_by_layer, plan_channel_gating,
                                 plan_channel_union, plan_reconfiguration,
                                 plan_sequential, revival_report,
                                 suppress_sparsified_channels,
                                 zero_flagged_channels)


def _zero_out_channel(g, conv, ch):
    conv.params["w"][ch] = 0.0
    for l in g.layers:
        if l.kind == "bn" and l.inputs[0] == conv.id:
            l.params["gamma"][ch] = 0.0
            l.params["beta"][ch] = 0.0


def _mask(lid, direction, width, zeroed):
    z = np.zeros(width, dtype=bool)
    z[list(zeroed)] = True
    return ChannelMask(lid, direction, z)


class TestSuppression:
    def test_tiny_weights_zero_even_with_live_bn(self):
        g = build_toy_vgg([8, 8], input_shape=(3, 8, 8), seed=3)
        conv = g.layers[0]
        conv.params["w"][2] *= 1e-9          # weights collapse; BN still live
        bn = g.layer(conv.id + 1)
        assert abs(bn.params["gamma"][2]) > 1e-4
        suppress_sparsified_channels(g, 1e-4)
        assert np.all(conv.params["w"][2] == 0.0)
        assert bn.params["gamma"][2] == 0.0 and bn.params["beta"][2] == 0.0
        assert np.all(conv.momentum["w"][2] == 0.0)
        # the strict detector now flags the channel
        md = masks_by_layer(detect_zeroed_channels(g, 1e-4))
        assert md[conv.id]["output"][2]

    def test_live_channels_bitwise_untouched(self):
        g = build_toy_vgg([8, 8], input_shape=(3, 8, 8), seed=3)
        conv = g.layers[0]
        conv.params["w"][2] *= 1e-9
        before = {l.id: {k: v.copy() for k, v in l.params.items()}
                  for l in g.layers}
        suppress_sparsified_channels(g, 1e-4)
        for l in g.layers:
            for name, v in l.params.items():
                keep = np.ones(v.shape[0], dtype=bool)
                if l.id in (0, 1):
                    keep[2] = False
                assert np.array_equal(v[keep], before[l.id][name][keep])

    def test_reapplying_pins_drifted_bn_shift(self):
        g = build_toy_vgg([8, 8], input_shape=(3, 8, 8), seed=3)
        conv = g.layers[0]
        conv.params["w"][2] *= 1e-9
        suppress_sparsified_channels(g, 1e-4)
        bn = g.layer(conv.id + 1)
        bn.params["beta"][2] = 0.02          # shift drifts back via its grad
        suppress_sparsified_channels(g, 1e-4)
        assert bn.params["beta"][2] == 0.0

    def test_returns_weight_only_masks(self):
        g = build_toy_vgg([8, 8], input_shape=(3, 8, 8), seed=3)
        convs = [l for l in g.layers if l.kind == "conv"]
        convs[1].params["w"][:, 5] *= 1e-9   # input-side column collapse
        masks = suppress_sparsified_channels(g, 1e-4)
        md = masks_by_layer(masks)
        assert md[convs[1].id]["input"][5]
        assert np.all(convs[1].params["w"][:, 5] == 0.0)


class TestDetect:
    def test_fresh_model_fully_dense(self):
        g = build_toy_resnet([(1, 8)], input_shape=(3, 8, 8), seed=0)
        md = masks_by_layer(detect_zeroed_channels(g, 1e-4))
        assert all(not sides["output"].any() and not sides["input"].any()
                   for sides in md.values())

    def test_manually_zeroed_channel_detected(self):
        g = build_toy_vgg([8, 8], input_shape=(3, 8, 8), seed=1)
        conv = g.layers[0]
        _zero_out_channel(g, conv, 2)
        md = masks_by_layer(detect_zeroed_channels(g, 1e-4))
        assert np.array_equal(np.flatnonzero(md[conv.id]["output"]), [2])

    def test_zero_weights_but_live_bn_not_flagged(self):
        g = build_toy_vgg([8, 8], input_shape=(3, 8, 8), seed=1)
        conv = g.layers[0]
        conv.params["w"][2] = 0.0  # BN gamma stays 1.0
        md = masks_by_layer(detect_zeroed_channels(g, 1e-4))
        assert not md[conv.id]["output"][2]

    def test_threshold_zero_flags_nothing(self):
        g = build_toy_vgg([8], input_shape=(3, 8, 8), seed=1)
        conv = g.layers[0]
        _zero_out_channel(g, conv, 0)
        md = masks_by_layer(detect_zeroed_channels(g, 0.0))
        assert not md[conv.id]["output"].any()  # strict inequality


class TestPlanSequential:
    def test_intersection_rule(self):
        g = build_toy_vgg([8, 8], input_shape=(3, 8, 8), seed=0)
        c1, c2 = [l for l in g.layers if l.kind == "conv"][:2]
        masks = [_mask(c1.id, "output", 8, {1, 3}),
                 _mask(c2.id, "input", 8, {3, 4})]
        plan = plan_sequential(masks, g)
        part = channel_classes(g)
        retained = plan.retained[part.out_root(c1.id)]
        assert np.array_equal(retained, [0, 1, 2, 4, 5, 6, 7])

    def test_disjoint_masks_prune_nothing(self):
        g = build_toy_vgg([8, 8], input_shape=(3, 8, 8), seed=0)
        c1, c2 = [l for l in g.layers if l.kind == "conv"][:2]
        masks = [_mask(c1.id, "output", 8, {1}),
                 _mask(c2.id, "input", 8, {4})]
        plan = plan_sequential(masks, g)
        part = channel_classes(g)
        assert plan.retained[part.out_root(c1.id)].size == 8

    def test_all_flagged_keeps_max_magnitude_channel(self):
        g = build_toy_vgg([8, 8], input_shape=(3, 8, 8), seed=0)
        c1, c2 = [l for l in g.layers if l.kind == "conv"][:2]
        c1.params["w"][:] = 0.001
        c1.params["w"][5] = 0.002  # the largest output channel
        masks = [_mask(c1.id, "output", 8, range(8)),
                 _mask(c2.id, "input", 8, range(8))]
        plan = plan_sequential(masks, g)
        part = channel_classes(g)
        assert np.array_equal(plan.retained[part.out_root(c1.id)], [5])

    def test_first_input_and_head_output_never_pruned(self):
        g = build_toy_vgg([8], input_shape=(3, 8, 8), classes=5, seed=0)
        conv = g.layers[0]
        head = g.layer(g.head_id)
        masks = [_mask(conv.id, "input", 3, {0, 1, 2}),
                 _mask(head.id, "output", 5, {0, 1, 2, 3, 4})]
        plan = plan_sequential(masks, g)
        part = channel_classes(g)
        assert plan.retained[part.root_of[-1]].size == 3
        assert plan.retained[part.out_root(head.id)].size == 5

    def test_stale_mask_raises(self):
        g = build_toy_vgg([8], input_shape=(3, 8, 8), seed=0)
        with pytest.raises(ConsistencyError):
            plan_sequential([_mask(g.layers[0].id, "output", 5, {1})], g)
        with pytest.raises(ConsistencyError):
            plan_sequential([_mask(999, "output", 8, {1})], g)


class TestPlanUnion:
    def _stage_instance(self):
        """Width-8 single-stage net with the four documented mask sets."""
        g = build_toy_resnet([(2, 8)], input_shape=(3, 8, 8), seed=0)
        stage = g.stages[0]
        a, b = stage.blocks
        a_first, a_last = _first_conv_of_path(g, a.path), _last_conv_of_path(g, a.path)
        b_first, b_last = _first_conv_of_path(g, b.path), _last_conv_of_path(g, b.path)
        stem = g.layers[0]
        dense = {
            (a_first, "input"): {0, 1, 2, 5},
            (a_last, "output"): {1, 2, 6},
            (b_first, "input"): {2, 5},
            (b_last, "output"): {1, 2},
            (stem.id, "output"): set(),   # stem contributes nothing dense
        }
        masks = [_mask(lid, d, 8, set(range(8)) - keep)
                 for (lid, d), keep in dense.items()]
        return g, stage, masks, (a_first, a_last, b_first, b_last)

    def test_union_of_dense_channels(self):
        g, stage, masks, _ = self._stage_instance()
        plan = plan_channel_union(masks, g)
        part = channel_classes(g)
        node_root = part.out_root(stage.blocks[0].add_id)
        assert np.array_equal(plan.retained[node_root], [0, 1, 2, 5, 6])

    def test_all_node_boundaries_share_the_retained_set(self):
        g, stage, masks, convs = self._stage_instance()
        plan = plan_channel_union(masks, g)
        part = channel_classes(g)
        node_root = part.out_root(stage.blocks[0].add_id)
        # every conv touching the node resolves to the same class
        a_first, a_last, b_first, b_last = convs
        for lid in (a_last, b_last, g.layers[0].id):
            assert part.out_root(lid) == node_root
        for lid in (a_first, b_first):
            assert part.in_root(g, lid) == node_root

    def test_all_dense_is_noop(self):
        g = build_toy_resnet([(2, 8)], input_shape=(3, 8, 8), seed=0)
        plan = plan_channel_union([], g)
        assert all(idx.size == cls.channels for idx, cls in
                   zip(plan.retained.values(),
                       [channel_classes(g).classes[r] for r in plan.retained]))

    def test_single_block_singleton(self):
        g = build_toy_resnet([(1, 8)], input_shape=(3, 8, 8), seed=0)
        stage = g.stages[0]
        blk = stage.blocks[0]
        first = _first_conv_of_path(g, blk.path)
        last = _last_conv_of_path(g, blk.path)
        masks = [_mask(first, "input", 8, set(range(8)) - {3}),
                 _mask(last, "output", 8, set(range(8)) - {3}),
                 _mask(g.layers[0].id, "output", 8, range(8))]
        plan = plan_channel_union(masks, g)
        part = channel_classes(g)
        assert np.array_equal(plan.retained[part.out_root(blk.add_id)], [3])


class TestPlanGating:
    def test_gather_narrower_than_union(self):
        g = build_toy_resnet([(2, 8)], input_shape=(3, 8, 8), seed=0)
        stage = g.stages[0]
        a = stage.blocks[0]
        a_first = _first_conv_of_path(g, a.path)
        masks = [_mask(a_first, "input", 8, set(range(8)) - {0, 1, 2, 5})]
        union = plan_channel_union(masks, g)
        gating = plan_channel_gating(masks, g)
        part = channel_classes(g)
        node_root = part.out_root(a.add_id)
        assert union.retained[node_root].size == 8  # other sides all dense
        assert np.array_equal(gating.gather[a_first], [0, 1, 2, 5])

    def test_all_dense_equals_union(self):
        g = build_toy_resnet([(2, 8)], input_shape=(3, 8, 8), seed=0)
        union = plan_channel_union([], g)
        gating = plan_channel_gating([], g)
        for root, idx in union.retained.items():
            assert np.array_equal(gating.retained[root], idx)
        assert all(v.size == 8 for v in gating.gather.values())

    def test_flops_ordering_random_masks(self):
        rng = np.random.default_rng(8)
        g = build_toy_resnet([(2, 6)], input_shape=(3, 8, 8), seed=0)
        dense_flops = costs.count_flops(g).inference_flops
        convs = [l for l in g.layers if l.kind == "conv"]
        for _ in range(25):
            masks = []
            for l in convs:
                masks.append(ChannelMask(l.id, "output",
                                         rng.random(l.out_channels) < 0.4))
                masks.append(ChannelMask(l.id, "input",
                                         rng.random(l.in_channels) < 0.4))
            union = plan_channel_union(masks, g)
            gating = plan_channel_gating(masks, g)
            uf = costs.count_flops_with_plan(g, union).inference_flops
            gf = costs.count_flops_with_plan(g, gating).inference_flops
            assert gf <= uf <= dense_flops


class TestApplyReconfiguration:
    def _state(self):
        return RunState(lam=0.05, epoch=3, iteration=99, batch_size=64,
                        base_batch_size=64, lr=0.1, base_lr=0.1)

    def test_noop_plan_is_identity(self):
        g = build_toy_resnet([(1, 8)], input_shape=(3, 8, 8), seed=4)
        plan = plan_reconfiguration(g, [])
        g2, _ = apply_reconfiguration(g, self._state(), plan)
        assert validate_graph(g2) == []
        for l1, l2 in zip(g.layers, g2.layers):
            assert l1.id == l2.id and l1.kind == l2.kind
            for name in l1.params:
                assert np.array_equal(l1.params[name], l2.params[name])

    def test_slicing_contract(self):
        g = build_toy_vgg([8, 8], input_shape=(3, 8, 8), seed=2)
        c1, c2 = [l for l in g.layers if l.kind == "conv"][:2]
        w_before = c1.params["w"].copy()
        masks = [_mask(c1.id, "output", 8, {3}), _mask(c2.id, "input", 8, {3})]
        plan = plan_sequential(masks, g)
        g2, _ = apply_reconfiguration(g, self._state(), plan)
        c1b = g2.layer(c1.id)
        keep = [0, 1, 2, 4, 5, 6, 7]
        assert c1b.out_channels == 7
        assert c1b.momentum["w"].shape[0] == 7
        assert np.array_equal(c1b.params["w"], w_before[keep])
        assert np.array_equal(c1b.orig_out, keep)
        bn1 = g2.layer(c1.id + 1)
        assert bn1.params["gamma"].shape == (7,)
        assert g2.layer(c2.id).params["w"].shape[1] == 7

    @pytest.mark.parametrize("builder,seed", [
        ("vgg", 0), ("vgg", 1), ("resnet", 0), ("resnet", 1), ("resnet", 2),
    ])
    def test_pruned_equals_zeroed_forward(self, builder, seed):
        rng = np.random.default_rng(seed)
        if builder == "vgg":
            g = build_toy_vgg([8, 8, 8], input_shape=(3, 8, 8),
                              dtype="float64", seed=seed)
        else:
            g = build_toy_resnet([(2, 8), (1, 6)], input_shape=(3, 8, 8),
                                 dtype="float64", seed=seed)
        # randomly drive channels under the threshold, then hard-zero
        for l in g.layers:
            if l.kind == "conv":
                drop = rng.random(l.out_channels) < 0.35
                l.params["w"][drop] *= 1e-9
                for b in g.layers:
                    if b.kind == "bn" and b.inputs[0] == l.id:
                        b.params["gamma"][drop] *= 1e-9
                        b.params["beta"][drop] *= 1e-9
        masks = detect_zeroed_channels(g, 1e-4)
        zero_flagged_channels(g, masks)
        plan = plan_reconfiguration(g, masks)
        g2, _ = apply_reconfiguration(g, self._state(), plan)
        assert validate_graph(g2) == []
        x = rng.normal(size=(4,) + g.input_shape)
        a = forward(g, x, training=False)
        b = forward(g2, x, training=False)
        assert np.abs(a - b).max() <= 1e-6
        # structural monotonicity
        assert g2.param_count() <= g.param_count()
        assert costs.count_flops(g2).inference_flops <= \
            costs.count_flops(g).inference_flops

    def test_idempotent(self):
        g = build_toy_resnet([(2, 8)], input_shape=(3, 8, 8), seed=6)
        path = g.stages[0].blocks[0].path
        c1, c2 = _first_conv_of_path(g, path), _last_conv_of_path(g, path)
        _zero_out_channel(g, g.layer(c1), 1)
        _zero_out_channel(g, g.layer(c1), 4)
        g.layer(c2).params["w"][:, [1, 4]] = 0.0  # zero both boundary sides
        masks = detect_zeroed_channels(g, 1e-4)
        assert masks_by_layer(masks)[c2]["input"][[1, 4]].all()
        zero_flagged_channels(g, masks)
        g2, _ = apply_reconfiguration(
            g, self._state(), plan_reconfiguration(g, masks))
        masks2 = detect_zeroed_channels(g2, 1e-4)
        g3, _ = apply_reconfiguration(
            g2, self._state(), plan_reconfiguration(g2, masks2))
        assert [l.id for l in g3.layers] == [l.id for l in g2.layers]
        for l2, l3 in zip(g2.layers, g3.layers):
            for name in l2.params:
                assert np.array_equal(l2.params[name], l3.params[name])

    def test_block_removal_rewires_to_shortcut(self):
        g = build_toy_resnet([(2, 8)], input_shape=(3, 8, 8),
                             dtype="float64", seed=7)
        blk = g.stages[0].blocks[0]
        last = _last_conv_of_path(g, blk.path)
        _zero_out_channel(g, g.layer(last), slice(None))
        masks = detect_zeroed_channels(g, 1e-4)
        zero_flagged_channels(g, masks)
        plan = plan_reconfiguration(g, masks)
        assert set(blk.path) <= plan.removed_layers
        assert blk.add_id in plan.removed_layers
        x = np.random.default_rng(0).normal(size=(3, 3, 8, 8))
        zeroed_out = forward(g, x, training=False)
        g2, _ = apply_reconfiguration(g, self._state(), plan)
        assert validate_graph(g2) == []
        assert len(g2.stages[0].blocks) == 1
        assert np.abs(forward(g2, x, training=False) - zeroed_out).max() <= 1e-6

    def test_out_of_range_plan_raises(self):
        g = build_toy_vgg([4], input_shape=(3, 8, 8), seed=0)
        plan = plan_reconfiguration(g, [])
        root = next(iter(plan.retained))
        plan.retained[root] = np.array([99])
        with pytest.raises(ConsistencyError):
            apply_reconfiguration(g, self._state(), plan)

    def test_plan_json_serializes(self):
        g = build_toy_resnet([(1, 4)], input_shape=(3, 8, 8), seed=0)
        plan = plan_reconfiguration(g, detect_zeroed_channels(g, 1e-4))
        doc = json.loads(plan.to_json())
        assert doc["mode"] == "union"
        assert all("retained" in b for b in doc["boundaries"])


class TestRevivalReport:
    def _history(self, rows):
        h = SparsityHistory(layer_widths={0: len(rows[0])})
        for r in rows:
            h.epochs.append({0: np.asarray(r, dtype=float)})
        return h

    def test_monotone_decreasing_no_revival(self):
        h = self._history([[1.0, 0.5], [0.5, 1e-6], [0.2, 1e-7]])
        rep = revival_report(h, 1e-4)
        assert rep["revived_channel_fraction"] == 0.0
        assert rep["ever_zeroed"] == 1

    def test_dip_and_recover_counts(self):
        h = self._history([[1.0], [1e-6], [1.0]])
        rep = revival_report(h, 1e-4)
        assert rep["ever_zeroed"] == 1 and rep["revived"] == 1
        assert rep["revived_channel_fraction"] == 1.0

    def test_json_round_trip(self):
        h = self._history([[0.3, 1e-5], [0.2, 1e-6]])
        h2 = SparsityHistory.from_json(h.to_json())
        assert h2.layer_widths == h.layer_widths
        for r1, r2 in zip(h.epochs, h2.epochs):
            for k in r1:
                assert np.allclose(r1[k], r2[k])
