"""FLOP, memory, and communication cost models, plus the one-time vs.
periodic reconfiguration comparison.

Model constants (documented, not tuned):
  - conv/linear forward FLOPs: 2 * MACs; training counts forward plus both
    backward passes (grad-input + grad-weight), i.e. 3x forward.
  - BN is costed at BN_FLOPS_PER_ELEM per output element forward; ReLU,
    pool, and add at 1 per element; non-parameterized layers count 2x
    forward in training mode (forward + one backward pass).
  - BN memory traffic: BN_PASSES full passes over the activation per
    training iteration (forward reads for mean/var/normalize plus the
    backward reads/writes). Only ratios of this quantity are consumed.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError
from .graph import (ADD, BN, CONV, LINEAR, MODEL_INPUT, POOL, RELU,
                    channel_classes, layer_output_shapes)

BN_FLOPS_PER_ELEM = 4
ELEM_FLOPS = 1
CONV_TRAIN_FACTOR = 3   # forward + grad-input + grad-weight
ELEM_TRAIN_FACTOR = 2   # forward + backward
BN_PASSES = 6           # activation passes per training iteration


@dataclass
class CostReport:
    per_layer: list = field(default_factory=list)
    inference_flops: float = 0.0
    training_flops: float = 0.0
    params: int = 0
    bn_traffic_bytes: float = 0.0
    comm_bytes_per_device_per_epoch: float = None
    updates_per_epoch: int = None

    def to_json(self):
        return json.dumps(self.__dict__, indent=1, sort_keys=True)


def _spatial(shapes, lid):
    shape = shapes[lid]
    return int(np.prod(shape[1:])) if len(shape) > 1 else 1


def _layer_costs(layer, shapes, batch, in_dim, out_dim, bytes_per_elem):
    hw_out = _spatial(shapes, layer.id)
    if layer.kind == CONV:
        macs = out_dim * in_dim * layer.kernel * layer.kernel * hw_out * batch
        fwd = 2.0 * macs
        return fwd, CONV_TRAIN_FACTOR * fwd, out_dim * in_dim * layer.kernel ** 2, 0.0
    if layer.kind == LINEAR:
        fwd = 2.0 * out_dim * in_dim * batch
        return fwd, CONV_TRAIN_FACTOR * fwd, out_dim * in_dim + out_dim, 0.0
    elems = out_dim * hw_out * batch
    if layer.kind == BN:
        fwd = BN_FLOPS_PER_ELEM * float(elems)
        traffic = BN_PASSES * float(elems) * bytes_per_elem
        return fwd, ELEM_TRAIN_FACTOR * fwd, 2 * out_dim, traffic
    fwd = ELEM_FLOPS * float(elems)
    return fwd, ELEM_TRAIN_FACTOR * fwd, 0, 0.0


def count_flops(g, mode="inference", batch=1, bytes_per_elem=4):
    """Cost report for the graph as-is."""
    shapes = layer_output_shapes(g)
    report = CostReport()
    for layer in g.layers:
        fwd, train, params, traffic = _layer_costs(
            layer, shapes, batch, layer.in_channels, layer.out_channels,
            bytes_per_elem,
        )
        report.per_layer.append({
            "layer": layer.id, "kind": layer.kind,
            "inference_flops": fwd, "training_flops": train,
            "params": params, "bn_traffic_bytes": traffic,
        })
        report.inference_flops += fwd
        report.training_flops += train
        report.params += params
        report.bn_traffic_bytes += traffic
    report.flops = report.inference_flops if mode == "inference" else report.training_flops
    return report


def count_flops_with_plan(g, plan, mode="inference", batch=1, bytes_per_elem=4):
    """Cost report for the dense graph evaluated at a plan's retained dims,
    without applying the plan. For gating plans, entry/exit convs of each
    residual path run at their own gather/scatter dims.
    """
    shapes = layer_output_shapes(g)
    part = channel_classes(g)
    report = CostReport()

    def dim_of(root, channels):
        if root in plan.retained:
            return int(np.asarray(plan.retained[root]).size)
        return channels

    for layer in g.layers:
        if layer.id in plan.removed_layers:
            continue
        out_root = part.out_root(layer.id)
        in_src = layer.inputs[0]
        in_root = part.root_of[in_src]
        out_dim = dim_of(out_root, part.classes[out_root].channels)
        in_dim = dim_of(in_root, part.classes[in_root].channels)
        if plan.mode == "gating":
            if layer.id in plan.gather:
                in_dim = int(np.asarray(plan.gather[layer.id]).size)
            if layer.id in plan.scatter:
                out_dim = int(np.asarray(plan.scatter[layer.id]).size)
        fwd, train, params, traffic = _layer_costs(
            layer, shapes, batch, in_dim, out_dim, bytes_per_elem,
        )
        report.per_layer.append({
            "layer": layer.id, "kind": layer.kind,
            "inference_flops": fwd, "training_flops": train,
            "params": params, "bn_traffic_bytes": traffic,
        })
        report.inference_flops += fwd
        report.training_flops += train
        report.params += params
        report.bn_traffic_bytes += traffic
    report.flops = report.inference_flops if mode == "inference" else report.training_flops
    return report


def bn_memory_traffic(g, batch=1, bytes_per_elem=4, passes=BN_PASSES):
    """Bytes moved by all BN layers in one training iteration."""
    shapes = layer_output_shapes(g)
    total = 0.0
    for layer in g.layers:
        if layer.kind == BN:
            elems = layer.out_channels * _spatial(shapes, layer.id) * batch
            total += passes * float(elems) * bytes_per_elem
    return total


def allreduce_cost(param_count, devices, updates_per_epoch=1, bytes_per_elem=4):
    """Ring-allreduce bytes sent per device per epoch.

    Per update, each device sends 2*(N-1)/N of the model (reduce-scatter
    then all-gather). Latency terms and link contention are ignored.
    """
    if devices < 1:
        raise ConsistencyError(f"device count {devices} must be >= 1")
    if devices == 1:
        return 0.0
    per_update = 2.0 * (devices - 1) * param_count * bytes_per_elem / devices
    return per_update * updates_per_epoch


# ---------------------------------------------------------------------------
# trajectory recording and the one-time-vs-periodic comparison
# ---------------------------------------------------------------------------

def masks_in_original_coords(g, masks, original_dims):
    """Lift current-model masks to the original (dense) channel coordinates.

    original_dims: {layer id: (in0, out0)} at build time. Channels already
    pruned away count as zeroed. Removed layers mask everything.
    """
    from .pruning import masks_by_layer
    md = masks_by_layer(masks)
    index = {l.id: l for l in g.layers}
    out = {}
    for lid, (in0, out0) in original_dims.items():
        in_z = np.ones(in0, dtype=bool)
        out_z = np.ones(out0, dtype=bool)
        layer = index.get(lid)
        if layer is not None:
            cur = md.get(lid, {})
            cur_out = cur.get("output", np.zeros(layer.out_channels, dtype=bool))
            cur_in = cur.get("input", np.zeros(layer.in_channels, dtype=bool))
            out_z[layer.orig_out] = cur_out
            in_z[layer.orig_in] = cur_in
        out[lid] = {"input": in_z, "output": out_z}
    return out


def trajectory_to_json(epoch_masks, interval, model_config):
    return json.dumps({
        "interval": interval,
        "model": model_config,
        "epochs": [
            {"epoch": e, "masks": {
                str(lid): {"input": [bool(b) for b in m["input"]],
                           "output": [bool(b) for b in m["output"]]}
                for lid, m in row.items()
            }}
            for e, row in enumerate(epoch_masks)
        ],
    })


def trajectory_from_json(text):
    doc = json.loads(text)
    epochs = []
    for entry in doc["epochs"]:
        epochs.append({
            int(lid): {"input": np.asarray(m["input"], dtype=bool),
                       "output": np.asarray(m["output"], dtype=bool)}
            for lid, m in entry["masks"].items()
        })
    return epochs, doc["interval"], doc.get("model")


def _plan_flops_from_original_masks(g0, row):
    from .pruning import ChannelMask, plan_reconfiguration
    masks = []
    for lid, m in row.items():
        masks.append(ChannelMask(lid, "input", m["input"]))
        masks.append(ChannelMask(lid, "output", m["output"]))
    plan = plan_reconfiguration(g0, masks)
    return count_flops_with_plan(g0, plan, mode="training").training_flops


def compare_one_time_vs_periodic(epoch_masks, g0, interval, policy_points=None,
                                 iters_per_epoch=1):
    """Total training FLOPs of one-time reconfiguration at each candidate
    epoch vs. periodic reconfiguration every `interval` epochs.

    epoch_masks[e] holds the cumulative zeroed-channel masks observed at
    the end of epoch e, in original channel coordinates. A one-time policy
    at epoch e trains dense for epochs < e and with the plan from
    epoch_masks[e-1] afterwards. The periodic policy re-plans at every
    multiple of the interval.
    """
    n_epochs = len(epoch_masks)
    dense = count_flops(g0, mode="training").training_flops
    flops_cache = {}

    def flops_at(mask_epoch):
        if mask_epoch not in flops_cache:
            flops_cache[mask_epoch] = _plan_flops_from_original_masks(
                g0, epoch_masks[mask_epoch]
            )
        return flops_cache[mask_epoch]

    periodic_total = 0.0
    for t in range(n_epochs):
        r = interval * (t // interval)
        per_iter = dense if r == 0 else flops_at(r - 1)
        periodic_total += per_iter * iters_per_epoch

    if policy_points is None:
        policy_points = list(range(interval, n_epochs, interval)) + [n_epochs]
    rows = []
    for e in policy_points:
        total = 0.0
        for t in range(n_epochs):
            per_iter = dense if t < e else flops_at(e - 1)
            total += per_iter * iters_per_epoch
        rows.append({
            "policy_epoch": e,
            "total_training_flops": total,
            "ratio_vs_periodic": total / periodic_total if periodic_total else 1.0,
        })
    return {
        "dense_total": dense * iters_per_epoch * n_epochs,
        "periodic_total": periodic_total,
        "one_time": rows,
    }
