"""JSON run configuration: hyperparameters plus model/dataset selection.
Unknown keys are rejected by name."""

import json

from .errors import ConfigurationError
from .graph import build_toy_resnet, build_toy_vgg
from .trainer import HyperParams

HP_KEYS = {
    "target_lasso_ratio", "threshold", "reconfig_interval", "batch_size",
    "lr", "momentum", "epochs", "memory_budget", "batch_granularity",
    "lr_decay_factor", "lr_milestones", "devices", "seed",
}
MODEL_KEYS = {"arch", "stages", "widths", "input_shape", "classes",
              "bottleneck", "dtype", "seed"}
DATASET_KEYS = {"kind", "dir", "count", "val_count", "classes", "seed",
                "shape", "noise", "augment_sigma", "rank"}


def _reject_unknown(doc, allowed, where):
    for key in doc:
        if key not in allowed:
            raise ConfigurationError(f"unknown config key {key!r} in {where}")


def load_config(path):
    with open(path) as f:
        doc = json.load(f)
    _reject_unknown(doc, HP_KEYS | {"model", "dataset"}, "top level")
    model = doc.pop("model", {})
    dataset = doc.pop("dataset", {})
    _reject_unknown(model, MODEL_KEYS, "model")
    _reject_unknown(dataset, DATASET_KEYS, "dataset")
    hp = HyperParams(**doc)
    hp.validate()
    return hp, model, dataset


def build_model(model):
    arch = model.get("arch", "resnet")
    kwargs = dict(
        input_shape=tuple(model.get("input_shape", (3, 32, 32))),
        classes=model.get("classes", 10),
        dtype=model.get("dtype", "float32"),
        seed=model.get("seed", 0),
    )
    if arch == "resnet":
        stages = [tuple(s) for s in model.get("stages", [(2, 16), (2, 32), (2, 64)])]
        return build_toy_resnet(stages, bottleneck=model.get("bottleneck", False),
                                **kwargs)
    if arch == "vgg":
        return build_toy_vgg(list(model.get("widths", [16, 16, 32, 32])), **kwargs)
    raise ConfigurationError(f"unknown model arch {arch!r}")


def build_dataset(dataset):
    from .data import load_cifar10, synth_dataset
    kind = dataset.get("kind", "synth")
    if kind == "cifar10":
        if "dir" not in dataset:
            raise ConfigurationError("dataset kind 'cifar10' requires 'dir'")
        handle = load_cifar10(dataset["dir"])
    elif kind == "synth":
        handle = synth_dataset(
            seed=dataset.get("seed", 0),
            count=dataset.get("count", 1024),
            shape=tuple(dataset.get("shape", (3, 32, 32))),
            classes=dataset.get("classes", 10),
            noise=dataset.get("noise", 0.6),
            rank=dataset.get("rank"),
        )
    else:
        raise ConfigurationError(f"unknown dataset kind {kind!r}")
    handle.augment_sigma = float(dataset.get("augment_sigma", 0.0))
    return handle
