"""End-to-end regularized training loop: one-shot penalty setup, periodic
prune-and-reconfigure, step LR decay, and dynamic mini-batch adjustment
driven by the iteration-memory estimator.
"""

import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import costs, graph as graph_mod, kernels, lasso, pruning
from .checkpoint import RunState, save_checkpoint
from .errors import ConfigurationError

METRIC_COLUMNS = [
    "epoch", "iter_count", "batch", "lr", "class_loss", "lasso_sum",
    "total_loss", "val_acc", "flops_per_iter", "params",
    "mem_estimate_bytes", "comm_bytes_per_epoch", "zeroed_channel_frac",
]


@dataclass
class HyperParams:
    target_lasso_ratio: float = 0.2
    threshold: float = 1e-4
    reconfig_interval: int = 10
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 60
    memory_budget: float = None   # bytes; None disables dynamic batching
    batch_granularity: int = 32
    lr_decay_factor: float = 0.1
    lr_milestones: list = None    # epoch indices; default 50% and 75% of E
    devices: int = 4              # for the communication cost projection
    seed: int = 0

    def milestones(self):
        if self.lr_milestones is not None:
            return list(self.lr_milestones)
        return [self.epochs // 2, (self.epochs * 3) // 4]

    def validate(self):
        if not (0.0 <= self.target_lasso_ratio < 1.0):
            raise ConfigurationError(
                f"target_lasso_ratio {self.target_lasso_ratio} not in [0,1)")
        if self.reconfig_interval < 1:
            raise ConfigurationError("reconfig_interval must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size and epochs must be positive")
        if self.batch_granularity < 1:
            raise ConfigurationError("batch_granularity must be >= 1")


@dataclass
class TrainingState:
    graph: object
    lam: float = None
    epoch: int = 0
    iteration: int = 0
    batch_size: int = 128
    base_batch_size: int = 128
    lr: float = 0.1
    base_lr: float = 0.1
    metrics: list = field(default_factory=list)
    history: object = None
    trajectory: list = field(default_factory=list)   # per-epoch original-coord masks
    plans: list = field(default_factory=list)        # (epoch, PrunePlan)

    def run_state(self):
        return RunState(lam=self.lam, epoch=self.epoch, iteration=self.iteration,
                        batch_size=self.batch_size, base_batch_size=self.base_batch_size,
                        lr=self.lr, base_lr=self.base_lr)


def estimate_iteration_memory(g, batch, bytes_per_elem=4):
    """Off-chip bytes one training iteration needs: all layer output
    activations (kept for backward) plus weights, gradients, and momentum.
    """
    if not g.layers:
        return 0
    shapes = graph_mod.layer_output_shapes(g)
    act_elems = sum(int(np.prod(shapes[l.id])) for l in g.layers)
    return batch * act_elems * bytes_per_elem + 3 * g.param_count() * bytes_per_elem


def adjust_mini_batch(state, hp, bytes_per_elem=4):
    """Grow the mini-batch to the largest granularity multiple fitting the
    memory budget, scaling LR by the same ratio. Never shrinks. Returns
    (new_batch, new_lr) and updates the state in place.
    """
    if hp.memory_budget is None:
        return state.batch_size, state.lr
    g = state.graph
    fixed = 3 * g.param_count() * bytes_per_elem
    shapes = graph_mod.layer_output_shapes(g)
    act = sum(int(np.prod(shapes[l.id])) for l in g.layers) * bytes_per_elem
    if act <= 0:
        return state.batch_size, state.lr
    gran = hp.batch_granularity
    feasible = int((hp.memory_budget - fixed) // (act * gran)) * gran
    if feasible < state.batch_size:
        return state.batch_size, state.lr
    new_batch = feasible
    new_lr = state.lr * (new_batch / state.batch_size)
    state.lr = new_lr
    state.batch_size = new_batch
    return new_batch, new_lr


def lr_schedule(epoch, hp, current_lr):
    """Step decay at the milestone epochs; composes multiplicatively with
    any dynamic-batch scaling already applied to current_lr.
    """
    if epoch in hp.milestones():
        return current_lr * hp.lr_decay_factor
    return current_lr


def evaluate_accuracy(g, dataset, batch=256):
    correct = 0
    for start in range(0, dataset.count, batch):
        x = dataset.images[start : start + batch].astype(g.np_dtype)
        logits = graph_mod.forward(g, x, training=False)
        correct += int((logits.argmax(axis=1) == dataset.labels[start : start + batch]).sum())
    return correct / dataset.count if dataset.count else 0.0


def _train_one_epoch(state, hp, groups, train_set, order, rng):
    g = state.graph
    dtype = g.np_dtype
    sum_class = 0.0
    sum_lasso = 0.0
    sum_total = 0.0
    samples = 0
    iters = 0
    for start in range(0, train_set.count, state.batch_size):
        idx = order[start : start + state.batch_size]
        x = train_set.images[idx].astype(dtype)
        if train_set.augment_sigma > 0.0:
            if train_set.augment_basis is not None:
                coeff = rng.standard_normal(
                    size=(x.shape[0], train_set.augment_basis.shape[0]),
                    dtype=np.float32)
                noise = (coeff @ train_set.augment_basis).reshape(x.shape)
            else:
                noise = rng.standard_normal(size=x.shape, dtype=np.float32)
            x = x + train_set.augment_sigma * noise.astype(dtype)
        y = train_set.labels[idx]
        n = x.shape[0]

        logits, cache = graph_mod.forward(g, x, training=True, want_cache=True)
        class_loss, grad_logits = kernels.softmax_cross_entropy(logits, y)
        raw_sum = lasso.group_lasso_raw_sum(g, groups)

        if state.iteration == 0 and state.lam is None:
            if hp.target_lasso_ratio > 0.0:
                state.lam = lasso.compute_penalty_coefficient(
                    class_loss, raw_sum, hp.target_lasso_ratio)
            else:
                state.lam = 0.0
            groups.lam = state.lam
        total_loss = class_loss + state.lam * raw_sum

        param_grads = graph_mod.backward(g, cache, grad_logits)
        if state.lam > 0.0:
            reg_grads = lasso.group_lasso_subgradient(g, groups)
            for lid, gw in reg_grads.items():
                param_grads[lid]["w"] = param_grads[lid]["w"] + gw
        for layer in g.layers:
            grads = param_grads.get(layer.id)
            if not grads:
                continue
            for name, grad in grads.items():
                kernels.sgd_momentum_step(
                    layer.params[name], grad.astype(layer.params[name].dtype),
                    layer.momentum[name], state.lr, hp.momentum,
                )
        sum_class += class_loss * n
        sum_lasso += raw_sum * n
        sum_total += total_loss * n
        samples += n
        iters += 1
        state.iteration += 1
    return sum_class / samples, sum_lasso / samples, sum_total / samples, iters


def _zeroed_fraction(epoch_mask_row):
    zeroed = sum(int(m["output"].sum()) for m in epoch_mask_row.values())
    total = sum(m["output"].size for m in epoch_mask_row.values())
    return zeroed / total if total else 0.0


def train(g, hp, train_set, val_set, out_dir=None, model_config=None):
    """Run the full training flow and return the final TrainingState.

    The graph is cloned; the caller's model is untouched. When out_dir is
    given, a crash checkpoint is written if any step raises.
    """
    hp.validate()
    state = TrainingState(
        graph=g.clone(), batch_size=hp.batch_size, base_batch_size=hp.batch_size,
        lr=hp.lr, base_lr=hp.lr,
        history=pruning.SparsityHistory.for_graph(g),
    )
    original_dims = {l.id: (l.in_channels, l.out_channels)
                     for l in g.layers if l.kind in (graph_mod.CONV, graph_mod.LINEAR)}
    groups = lasso.build_lasso_groups(state.graph, lam=0.0)
    rng = np.random.default_rng(hp.seed)
    try:
        for epoch in range(hp.epochs):
            state.epoch = epoch
            state.lr = lr_schedule(epoch, hp, state.lr)
            order = rng.permutation(train_set.count)
            class_loss, lasso_sum, total_loss, iters = _train_one_epoch(
                state, hp, groups, train_set, order, rng)

            cur = state.graph
            if hp.target_lasso_ratio > 0.0:
                pruning.suppress_sparsified_channels(cur, hp.threshold)
            masks = pruning.detect_zeroed_channels(cur, hp.threshold)
            orig_masks = costs.masks_in_original_coords(cur, masks, original_dims)
            state.trajectory.append(orig_masks)
            state.history.record(cur)

            flops_per_iter = costs.count_flops(
                cur, mode="training", batch=state.base_batch_size).training_flops
            params = cur.param_count()
            bpe = np.dtype(cur.np_dtype).itemsize
            updates = math.ceil(train_set.count / state.batch_size)
            state.metrics.append({
                "epoch": epoch,
                "iter_count": iters,
                "batch": state.batch_size,
                "lr": state.lr,
                "class_loss": class_loss,
                "lasso_sum": lasso_sum,
                "total_loss": total_loss,
                "val_acc": evaluate_accuracy(cur, val_set),
                "flops_per_iter": flops_per_iter,
                "params": params,
                "mem_estimate_bytes": estimate_iteration_memory(
                    cur, state.batch_size, bpe),
                "comm_bytes_per_epoch": costs.allreduce_cost(
                    params, hp.devices, updates, bpe),
                "zeroed_channel_frac": _zeroed_fraction(orig_masks),
            })

            if (epoch + 1) % hp.reconfig_interval == 0:
                pruning.zero_flagged_channels(cur, masks)
                plan = pruning.plan_reconfiguration(cur, masks)
                new_graph, _ = pruning.apply_reconfiguration(cur, state.run_state(), plan)
                state.graph = new_graph
                state.plans.append((epoch, plan))
                groups = lasso.build_lasso_groups(state.graph, lam=state.lam or 0.0)
                adjust_mini_batch(state, hp, bpe)
    except Exception:
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            save_checkpoint(state.graph, state.run_state(),
                            os.path.join(out_dir, "crash.ptck"))
        raise
    return state


def metrics_to_csv(rows):
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"
