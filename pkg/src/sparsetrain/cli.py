"""Command-line surface: train, cost, compare, report, validate."""

import json
import os
import sys

import click

from . import costs, graph as graph_mod, pruning
from .checkpoint import load_checkpoint, save_checkpoint
from .config import build_dataset, build_model, load_config
from .errors import SparseTrainError
from .trainer import metrics_to_csv, train


@click.group()
def main():
    """CNN training with group-lasso sparsification and live pruning."""


def _fail(err):
    click.echo(f"error: {err}", err=True)
    sys.exit(1)


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def train_cmd(config_path, out_dir):
    """Run a training job from a JSON config; writes metrics.csv,
    checkpoints, plan JSONs, trajectory.json, and history.json."""
    try:
        hp, model_cfg, dataset_cfg = load_config(config_path)
        g = build_model(model_cfg)
        ds = build_dataset(dataset_cfg)
        val_count = dataset_cfg.get("val_count", max(1, ds.count // 10))
        train_set = ds.subset(0, ds.count - val_count)
        val_set = ds.subset(ds.count - val_count, ds.count)
        os.makedirs(out_dir, exist_ok=True)
        state = train(g, hp, train_set, val_set, out_dir=out_dir)
    except SparseTrainError as e:
        _fail(e)
    with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
        f.write(metrics_to_csv(state.metrics))
    save_checkpoint(state.graph, state.run_state(),
                    os.path.join(out_dir, "final.ptck"))
    for epoch, plan in state.plans:
        with open(os.path.join(out_dir, f"plan_epoch{epoch:04d}.json"), "w") as f:
            f.write(plan.to_json())
    with open(os.path.join(out_dir, "trajectory.json"), "w") as f:
        f.write(costs.trajectory_to_json(state.trajectory, hp.reconfig_interval,
                                         model_cfg))
    with open(os.path.join(out_dir, "history.json"), "w") as f:
        f.write(state.history.to_json())
    click.echo(f"trained {hp.epochs} epochs; outputs in {out_dir}")


@main.command("cost")
@click.option("--checkpoint", "ckpt", required=True, type=click.Path(exists=True))
@click.option("--batch", default=1, type=int)
@click.option("--mode", default="inference", type=click.Choice(["inference", "training"]))
@click.option("--devices", default=4, type=int)
def cost_cmd(ckpt, batch, mode, devices):
    """Print a JSON cost report for a checkpointed model."""
    try:
        g, state = load_checkpoint(ckpt)
        report = costs.count_flops(g, mode=mode, batch=batch)
        report.updates_per_epoch = 1
        report.comm_bytes_per_device_per_epoch = costs.allreduce_cost(
            g.param_count(), devices, 1, 4)
    except SparseTrainError as e:
        _fail(e)
    click.echo(report.to_json())


@main.command("compare")
@click.option("--trajectory", "traj_path", required=True, type=click.Path(exists=True))
@click.option("--interval", default=None, type=int,
              help="override the interval recorded in the trajectory")
def compare_cmd(traj_path, interval):
    """One-time vs. periodic reconfiguration: total training FLOPs table."""
    try:
        with open(traj_path) as f:
            epoch_masks, recorded_interval, model_cfg = costs.trajectory_from_json(f.read())
        g0 = build_model(model_cfg or {})
        result = costs.compare_one_time_vs_periodic(
            epoch_masks, g0, interval or recorded_interval)
    except SparseTrainError as e:
        _fail(e)
    click.echo(f"{'policy':>16}  {'total training FLOPs':>22}  {'vs periodic':>12}")
    click.echo(f"{'periodic':>16}  {result['periodic_total']:>22.4g}  {1.0:>12.3f}")
    for row in result["one_time"]:
        click.echo(f"{'one-time@' + str(row['policy_epoch']):>16}  "
                   f"{row['total_training_flops']:>22.4g}  "
                   f"{row['ratio_vs_periodic']:>12.3f}")


@main.command("report")
@click.option("--history", "history_path", required=True, type=click.Path(exists=True))
@click.option("--threshold", default=1e-4, type=float)
def report_cmd(history_path, threshold):
    """Channel revival and density report from a recorded sparsity history."""
    try:
        with open(history_path) as f:
            history = pruning.SparsityHistory.from_json(f.read())
        rep = pruning.revival_report(history, threshold)
        if history.epochs:
            last = history.epochs[-1]
            density = {
                str(lid): float((last[lid] >= threshold).mean())
                for lid in history.layer_widths
            }
            rep["final_channel_density"] = density
    except SparseTrainError as e:
        _fail(e)
    click.echo(json.dumps(rep, indent=1, sort_keys=True))


@main.command("validate")
@click.option("--checkpoint", "ckpt", required=True, type=click.Path(exists=True))
def validate_cmd(ckpt):
    """Structural check of a checkpointed model graph."""
    try:
        g, _ = load_checkpoint(ckpt)
        violations = graph_mod.validate_graph(g)
    except SparseTrainError as e:
        _fail(e)
    if violations:
        for v in violations:
            click.echo(v, err=True)
        sys.exit(1)
    click.echo("ok")


if __name__ == "__main__":
    main()
