"""Zeroed-channel detection, prune planning, and live reconfiguration.

Planning works on *channel classes*: sets of layer sides tied together by
the graph wiring (a sequential boundary is a two-sided class; the shared
node of a residual stage is one many-sided class). The retained set of a
class is the union of the dense (above-threshold) channel sets of its
counted sides, which is exactly the intersection rule on sequential
boundaries and the channel-union rule on residual-stage nodes.
"""

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError
from .graph import (ADD, BN, CONV, LINEAR, MODEL_INPUT, channel_classes,
                    validate_graph, _first_conv_of_path, _last_conv_of_path)


@dataclass
class ChannelMask:
    layer_id: int
    direction: str       # "input" | "output"
    zeroed: np.ndarray   # bool vector, True = below threshold


@dataclass
class PrunePlan:
    retained: dict                 # class root -> sorted np.ndarray of retained indices
    removed_layers: set = field(default_factory=set)
    mode: str = "sequential"       # sequential | union | gating
    # gating only: per residual-path conv, retained index lists at its own
    # input (gather) and output (scatter)
    gather: dict = field(default_factory=dict)
    scatter: dict = field(default_factory=dict)

    def to_json(self, g=None):
        doc = {
            "mode": self.mode,
            "removed_layers": sorted(int(i) for i in self.removed_layers),
            "boundaries": [
                {"class": int(root), "retained": [int(i) for i in idx]}
                for root, idx in sorted(self.retained.items())
            ],
        }
        if self.gather:
            doc["gather"] = {str(k): [int(i) for i in v] for k, v in self.gather.items()}
            doc["scatter"] = {str(k): [int(i) for i in v] for k, v in self.scatter.items()}
        return json.dumps(doc, indent=1, sort_keys=True)


@dataclass
class SparsityHistory:
    """Per epoch, per conv layer: max-abs weight of each original output
    channel. Channels pruned away keep recording as zero.
    """

    layer_widths: dict = field(default_factory=dict)  # conv id -> original K
    epochs: list = field(default_factory=list)        # list of {conv id: np.ndarray}

    @classmethod
    def for_graph(cls, g):
        widths = {l.id: l.out_channels for l in g.layers if l.kind == CONV}
        return cls(layer_widths=widths)

    def record(self, g):
        index = {l.id: l for l in g.layers}
        row = {}
        for lid, width in self.layer_widths.items():
            vals = np.zeros(width)
            layer = index.get(lid)
            if layer is not None:
                per_ch = np.abs(layer.params["w"]).max(axis=tuple(range(1, layer.params["w"].ndim)))
                vals[layer.orig_out] = per_ch
            row[lid] = vals
        self.epochs.append(row)

    def to_json(self):
        return json.dumps({
            "layer_widths": {str(k): int(v) for k, v in self.layer_widths.items()},
            "epochs": [{str(k): [float(x) for x in v] for k, v in row.items()}
                       for row in self.epochs],
        })

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(
            layer_widths={int(k): v for k, v in doc["layer_widths"].items()},
            epochs=[{int(k): np.asarray(v) for k, v in row.items()}
                    for row in doc["epochs"]],
        )


def _max_abs(w, axis_keep):
    other = tuple(i for i in range(w.ndim) if i != axis_keep)
    return np.abs(w).max(axis=other)


def detect_zeroed_channels(g, threshold):
    """Flag channels whose weights (and, on the output side, the attached
    BN gamma/beta) are all strictly below threshold.
    """
    masks = []
    bn_after = {}
    for l in g.layers:
        if l.kind == BN:
            bn_after[l.inputs[0]] = l
    for l in g.layers:
        if l.kind not in (CONV, LINEAR):
            continue
        w = l.params["w"]
        out_z = _max_abs(w, 0) < threshold
        bn = bn_after.get(l.id)
        if bn is not None:
            bn_max = np.maximum(np.abs(bn.params["gamma"]), np.abs(bn.params["beta"]))
            out_z &= bn_max < threshold
        in_z = _max_abs(w, 1) < threshold
        masks.append(ChannelMask(l.id, "output", out_z))
        masks.append(ChannelMask(l.id, "input", in_z))
    return masks


def detect_sparsified_channels(g, threshold):
    """Weight-only channel flags: a channel counts as sparsified when every
    one of its weights is strictly below threshold, regardless of BN state.
    """
    masks = []
    for l in g.layers:
        if l.kind not in (CONV, LINEAR):
            continue
        w = l.params["w"]
        masks.append(ChannelMask(l.id, "output", _max_abs(w, 0) < threshold))
        masks.append(ChannelMask(l.id, "input", _max_abs(w, 1) < threshold))
    return masks


def suppress_sparsified_channels(g, threshold):
    """Hard-zero channels whose weights have all collapsed below threshold,
    along with their BN parameters and momentum, in place.

    With gamma and beta at zero, the channel's output and every gradient
    reaching its weights are exactly zero, so the channel cannot revive;
    re-applying each epoch keeps BN shift from drifting back up. Returns
    the weight-only masks that were zeroed.
    """
    masks = detect_sparsified_channels(g, threshold)
    zero_flagged_channels(g, masks)
    return masks


def masks_by_layer(masks):
    """{layer id: {"input": bool array, "output": bool array}}."""
    d = {}
    for m in masks:
        d.setdefault(m.layer_id, {})[m.direction] = np.asarray(m.zeroed, dtype=bool)
    return d


def zero_flagged_channels(g, masks):
    """Hard-set flagged channels' weights, BN params, and momentum to zero,
    in place. Makes pruned-vs-zeroed forward equivalence exact.
    """
    md = masks_by_layer(masks)
    bn_after = {}
    for l in g.layers:
        if l.kind == BN:
            bn_after[l.inputs[0]] = l
    for l in g.layers:
        if l.id not in md:
            continue
        out_z = md[l.id].get("output")
        in_z = md[l.id].get("input")
        if out_z is not None and out_z.any():
            l.params["w"][out_z] = 0
            l.momentum["w"][out_z] = 0
            if l.kind == LINEAR and out_z.any():
                l.params["b"][out_z] = 0
                l.momentum["b"][out_z] = 0
            bn = bn_after.get(l.id)
            if bn is not None:
                for name in ("gamma", "beta"):
                    bn.params[name][out_z] = 0
                    bn.momentum[name][out_z] = 0
        if in_z is not None and in_z.any():
            l.params["w"][:, in_z] = 0
            l.momentum["w"][:, in_z] = 0


def _check_masks(g, md):
    index = {l.id: l for l in g.layers}
    for lid, sides in md.items():
        if lid not in index:
            raise ConsistencyError(f"mask refers to unknown layer {lid}")
        l = index[lid]
        if "output" in sides and sides["output"].shape[0] != l.out_channels:
            raise ConsistencyError(
                f"output mask length {sides['output'].shape[0]} != layer {lid} "
                f"out_channels {l.out_channels}"
            )
        if "input" in sides and sides["input"].shape[0] != l.in_channels:
            raise ConsistencyError(
                f"input mask length {sides['input'].shape[0]} != layer {lid} "
                f"in_channels {l.in_channels}"
            )


def _removable_blocks(g, md):
    """Blocks whose residual-path contribution is identically zero after
    zeroing: every output channel of the path's last conv is flagged.
    Their layers can be removed because the shortcut carries the node.
    """
    removable = []
    for stage in g.stages:
        for block in stage.blocks:
            last = _last_conv_of_path(g, block.path)
            out_z = md.get(last, {}).get("output")
            if out_z is not None and out_z.all():
                removable.append((stage.stage_id, block))
    return removable


def _plan(g, masks, stages, mode):
    md = masks_by_layer(masks)
    _check_masks(g, md)
    part = channel_classes(g)
    index = {l.id: l for l in g.layers}

    removed = set()
    for _, block in _removable_blocks(g, md):
        removed.update(block.path)
        removed.add(block.add_id)

    def dense_out(lid):
        z = md.get(lid, {}).get("output")
        if z is None:
            return np.ones(index[lid].out_channels, dtype=bool)
        return ~z

    def dense_in(lid):
        z = md.get(lid, {}).get("input")
        if z is None:
            return np.ones(index[lid].in_channels, dtype=bool)
        return ~z

    # the shared-node class of each stage, with the consumers that belong
    # to the stage (first convs of its blocks)
    node_in_stage_consumers = {}
    for stage in stages:
        if not stage.blocks:
            continue
        node_root = part.out_root(stage.blocks[0].add_id)
        members = node_in_stage_consumers.setdefault(node_root, set())
        for block in stage.blocks:
            members.add(_first_conv_of_path(g, block.path))

    retained = {}
    for root, cls in part.classes.items():
        if cls.has_model_input or cls.is_head_output:
            retained[root] = np.arange(cls.channels)
            continue
        dense = np.zeros(cls.channels, dtype=bool)
        producers = [p for p in cls.producers if p not in removed]
        if root in node_in_stage_consumers:
            consumers = [c for c in cls.consumers
                         if c in node_in_stage_consumers[root] and c not in removed]
        else:
            consumers = [c for c in cls.consumers if c not in removed]
        for p in producers:
            dense |= dense_out(p)
        for c in consumers:
            dense |= dense_in(c)
        idx = np.flatnonzero(dense)
        if idx.size == 0:
            # minimum-channel rule: keep the single largest-magnitude channel
            best, best_val = 0, -1.0
            for p in producers:
                vals = _max_abs(index[p].params["w"], 0)
                k = int(vals.argmax())
                if vals[k] > best_val:
                    best, best_val = k, float(vals[k])
            idx = np.array([best])
        retained[root] = idx
    return PrunePlan(retained=retained, removed_layers=removed, mode=mode)


def plan_sequential(masks, g):
    """Intersection rule on every boundary; no residual-stage handling."""
    return _plan(g, masks, stages=[], mode="sequential")


def plan_channel_union(masks, g, stage=None):
    """Channel-union rule at residual-stage shared nodes (all stages by
    default), intersection rule on interior boundaries.
    """
    stages = g.stages if stage is None else [stage]
    return _plan(g, masks, stages=stages, mode="union")


def plan_reconfiguration(g, masks):
    """The plan the trainer applies: union at stage nodes, intersection
    elsewhere.
    """
    mode = "union" if g.stages else "sequential"
    return _plan(g, masks, stages=g.stages, mode=mode)


def plan_channel_gating(masks, g, stage=None):
    """Per-layer maximal pruning with gather/scatter maps at residual-path
    entry/exit. Cost-model input only; the trainer never executes it.
    """
    md = masks_by_layer(masks)
    _check_masks(g, md)
    plan = _plan(g, masks, stages=(g.stages if stage is None else [stage]), mode="gating")
    index = {l.id: l for l in g.layers}
    stages = g.stages if stage is None else [stage]
    for st in stages:
        for block in st.blocks:
            if block.add_id in plan.removed_layers:
                continue
            first = _first_conv_of_path(g, block.path)
            last = _last_conv_of_path(g, block.path)
            in_z = md.get(first, {}).get("input")
            out_z = md.get(last, {}).get("output")
            in_dense = np.flatnonzero(~in_z) if in_z is not None else np.arange(index[first].in_channels)
            out_dense = np.flatnonzero(~out_z) if out_z is not None else np.arange(index[last].out_channels)
            if in_dense.size == 0:
                in_dense = np.array([0])
            if out_dense.size == 0:
                out_dense = np.array([0])
            plan.gather[first] = in_dense
            plan.scatter[last] = out_dense
        if st.projection_id is not None and st.projection_id not in plan.removed_layers:
            proj = index[st.projection_id]
            in_z = md.get(proj.id, {}).get("input")
            out_z = md.get(proj.id, {}).get("output")
            in_dense = np.flatnonzero(~in_z) if in_z is not None else np.arange(proj.in_channels)
            out_dense = np.flatnonzero(~out_z) if out_z is not None else np.arange(proj.out_channels)
            plan.gather[proj.id] = in_dense if in_dense.size else np.array([0])
            plan.scatter[proj.id] = out_dense if out_dense.size else np.array([0])
    return plan


def apply_reconfiguration(g, state, plan):
    """Slice every tensor to the plan's retained indices (order preserved),
    drop removed layers, and rewire. Returns a new (graph, state); scalar
    state (lambda, epoch, LR, batch) is carried over unchanged.
    """
    part = channel_classes(g)
    for root, idx in plan.retained.items():
        if root not in part.classes:
            raise ConsistencyError(f"plan references unknown channel class {root}")
        cls = part.classes[root]
        idx = np.asarray(idx)
        if idx.size == 0 or idx.min() < 0 or idx.max() >= cls.channels:
            raise ConsistencyError(
                f"retained indices out of range for class {root} "
                f"({cls.channels} channels)"
            )

    g2 = g.clone()
    state2 = copy.deepcopy(state)
    index = {l.id: l for l in g2.layers}

    def retained_of(root, channels):
        if root in plan.retained:
            return np.asarray(plan.retained[root])
        return np.arange(channels)

    # rewire around removed add layers first
    removed = set(plan.removed_layers)
    redirect = {}
    for l in g2.layers:
        if l.id in removed and l.kind == ADD:
            redirect[l.id] = l.inputs[1]  # the shortcut input

    def resolve(src):
        while src in redirect:
            src = redirect[src]
        return src

    kept = []
    for l in g2.layers:
        if l.id in removed:
            continue
        l.inputs = [resolve(s) for s in l.inputs]
        out_root = part.out_root(l.id)
        in_root = part.root_of[l.inputs[0]] if l.inputs[0] != MODEL_INPUT else part.root_of[MODEL_INPUT]
        out_idx = retained_of(out_root, part.classes[out_root].channels)
        in_idx = retained_of(in_root, part.classes[in_root].channels)
        if l.kind == CONV:
            l.params["w"] = np.ascontiguousarray(l.params["w"][out_idx][:, in_idx])
            l.momentum["w"] = np.ascontiguousarray(l.momentum["w"][out_idx][:, in_idx])
            l.orig_out = l.orig_out[out_idx]
            l.orig_in = l.orig_in[in_idx]
            l.in_channels, l.out_channels = in_idx.size, out_idx.size
        elif l.kind == LINEAR:
            l.params["w"] = np.ascontiguousarray(l.params["w"][out_idx][:, in_idx])
            l.momentum["w"] = np.ascontiguousarray(l.momentum["w"][out_idx][:, in_idx])
            l.params["b"] = l.params["b"][out_idx].copy()
            l.momentum["b"] = l.momentum["b"][out_idx].copy()
            l.orig_out = l.orig_out[out_idx]
            l.orig_in = l.orig_in[in_idx]
            l.in_channels, l.out_channels = in_idx.size, out_idx.size
        elif l.kind == BN:
            for d in (l.params, l.buffers, l.momentum):
                for name in list(d):
                    d[name] = d[name][out_idx].copy()
            l.orig_out = l.orig_out[out_idx]
            l.in_channels = l.out_channels = out_idx.size
        else:
            l.in_channels = l.out_channels = out_idx.size
        kept.append(l)
    g2.layers = kept

    new_stages = []
    for stage in g2.stages:
        blocks = [b for b in stage.blocks if b.add_id not in removed]
        if not blocks:
            continue
        node_root = part.out_root(blocks[0].add_id)
        stage.blocks = blocks
        stage.width = retained_of(node_root, part.classes[node_root].channels).size
        if stage.projection_id in removed:
            stage.projection_id = None
        new_stages.append(stage)
    g2.stages = new_stages

    violations = validate_graph(g2)
    if violations:
        raise AssertionError(
            "reconfiguration produced an invalid graph (internal error): "
            + "; ".join(violations)
        )
    return g2, state2


def revival_report(history, threshold):
    """A channel counts as revived when its max-abs weight drops below
    threshold at some epoch and rises above it at a later epoch.
    """
    per_layer = {}
    total_zeroed = 0
    total_revived = 0
    for lid, width in history.layer_widths.items():
        traj = np.stack([row[lid] for row in history.epochs]) if history.epochs \
            else np.zeros((0, width))
        zeroed = 0
        revived = 0
        for ch in range(width):
            v = traj[:, ch]
            below = np.flatnonzero(v < threshold)
            if below.size == 0:
                continue
            zeroed += 1
            first = below[0]
            if (v[first + 1 :] > threshold).any():
                revived += 1
        per_layer[lid] = {"ever_zeroed": zeroed, "revived": revived}
        total_zeroed += zeroed
        total_revived += revived
    frac = (total_revived / total_zeroed) if total_zeroed else 0.0
    return {
        "revived_channel_fraction": frac,
        "ever_zeroed": total_zeroed,
        "revived": total_revived,
        "per_layer": per_layer,
    }
