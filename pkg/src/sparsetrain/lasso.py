"""Channel-wise group lasso: penalty, subgradient, and the one-shot
penalty-coefficient setup.

Every regularized conv/linear weight belongs to exactly two overlapping
groups: its input-channel slice and its output-channel slice. The input
channels of the first conv and the output neurons of the final linear
layer are excluded; BN parameters and biases are never regularized.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, SetupError
from .graph import CONV, LINEAR, MODEL_INPUT

ZERO_NORM_TOL = 1e-12  # groups with L2 norm below this get a zero subgradient


@dataclass
class LassoGroups:
    """Which weight slices are regularized, plus the global coefficient."""

    lam: float = 0.0
    # layer id -> (regularize_input_side, regularize_output_side)
    sides: dict = field(default_factory=dict)
    # layer id -> weight shape at build time, to detect stale indices
    shapes: dict = field(default_factory=dict)


def build_lasso_groups(g, lam=0.0, exclude_first_input=True, exclude_last_output=True):
    param_layers = [l for l in g.layers if l.kind in (CONV, LINEAR)]
    first_id = None
    if exclude_first_input:
        for l in param_layers:
            if l.inputs[0] == MODEL_INPUT:
                first_id = l.id
                break
    last_id = g.head_id if exclude_last_output else None
    groups = LassoGroups(lam=lam)
    for l in param_layers:
        groups.sides[l.id] = (l.id != first_id, l.id != last_id)
        groups.shapes[l.id] = l.params["w"].shape
    return groups


def _check(g, groups):
    for l in g.layers:
        if l.kind in (CONV, LINEAR):
            if l.id not in groups.sides:
                raise ConsistencyError(f"layer {l.id} missing from lasso group index")
            if groups.shapes[l.id] != l.params["w"].shape:
                raise ConsistencyError(
                    f"lasso groups built for weight shape {groups.shapes[l.id]} "
                    f"but layer {l.id} now has {l.params['w'].shape}"
                )


def _group_norms(w):
    """(input-side norms over axis c, output-side norms over axis k).

    conv w is (K,C,R,S): input group c is w[:,c,:,:], output group k is
    w[k,:,:,:]. linear w is (M,D): input group d is w[:,d], output m is w[m,:].
    """
    k_axis_rest = tuple(range(1, w.ndim))
    in_norms = np.sqrt((w.astype(np.float64) ** 2).sum(axis=(0,) + k_axis_rest[1:]))
    out_norms = np.sqrt((w.astype(np.float64) ** 2).sum(axis=k_axis_rest))
    return in_norms, out_norms


def group_lasso_raw_sum(g, groups):
    """Unweighted sum of group L2 norms over all regularized groups."""
    _check(g, groups)
    total = 0.0
    for l in g.layers:
        if l.kind not in (CONV, LINEAR):
            continue
        reg_in, reg_out = groups.sides[l.id]
        in_norms, out_norms = _group_norms(l.params["w"])
        if reg_in:
            total += float(in_norms.sum())
        if reg_out:
            total += float(out_norms.sum())
    return total


def group_lasso_subgradient(g, groups):
    """Per-layer gradient tensors of lam * raw_sum.

    A group contributes lam * w / ||group|| when its norm exceeds
    ZERO_NORM_TOL, else zero; the two overlapping groups of each weight sum.
    Returns {layer_id: grad array like the layer's weight}.
    """
    _check(g, groups)
    out = {}
    for l in g.layers:
        if l.kind not in (CONV, LINEAR):
            continue
        w = l.params["w"]
        reg_in, reg_out = groups.sides[l.id]
        grad = np.zeros_like(w)
        in_norms, out_norms = _group_norms(w)
        if reg_in:
            scale = np.where(in_norms > ZERO_NORM_TOL, 1.0 / np.maximum(in_norms, ZERO_NORM_TOL), 0.0)
            shape = (1, w.shape[1]) + (1,) * (w.ndim - 2)
            grad += (groups.lam * scale.reshape(shape)).astype(w.dtype) * w
        if reg_out:
            scale = np.where(out_norms > ZERO_NORM_TOL, 1.0 / np.maximum(out_norms, ZERO_NORM_TOL), 0.0)
            shape = (w.shape[0],) + (1,) * (w.ndim - 1)
            grad += (groups.lam * scale.reshape(shape)).astype(w.dtype) * w
        out[l.id] = grad
    return out


def compute_penalty_coefficient(class_loss, raw_sum, target_ratio):
    """Solve for lam so that lam*S / (l + lam*S) == target_ratio.

    Computed exactly once at the first training iteration and then held
    fixed for the rest of the run.
    """
    if not (0.0 < target_ratio < 1.0):
        raise SetupError(f"target ratio {target_ratio} must be in (0,1)")
    if class_loss <= 0.0:
        raise SetupError(f"classification loss {class_loss} must be positive")
    if raw_sum <= 0.0:
        raise SetupError(f"raw lasso sum {raw_sum} must be positive")
    return target_ratio * class_loss / ((1.0 - target_ratio) * raw_sum)
