"""Binary checkpoint format.

Layout: magic b"PTCK", u32 version, u64 header length, JSON architecture
header (UTF-8), then raw little-endian IEEE-754 tensor payloads in the
order the header declares. Round-trips are bitwise lossless, including
momentum buffers and BN running statistics.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .graph import Block, LayerSpec, ModelGraph, ResidualStage

MAGIC = b"PTCK"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class RunState:
    """Scalar training state carried alongside the model."""

    lam: float = None          # group-lasso penalty coefficient
    epoch: int = 0
    iteration: int = 0
    batch_size: int = 128
    base_batch_size: int = 128
    lr: float = 0.1
    base_lr: float = 0.1


def _tensor_entries(g):
    """(layer_id, group, name, array) in deterministic order."""
    for layer in g.layers:
        for group, d in (("params", layer.params),
                         ("buffers", layer.buffers),
                         ("momentum", layer.momentum)):
            for name in sorted(d):
                yield layer.id, group, name, d[name]


def _arch_header(g, state):
    layers = []
    for l in g.layers:
        layers.append({
            "id": l.id, "kind": l.kind, "inputs": list(l.inputs),
            "in_channels": l.in_channels, "out_channels": l.out_channels,
            "kernel": l.kernel, "stride": l.stride, "pad": l.pad,
            "bn_eps": l.bn_eps, "bn_momentum": l.bn_momentum,
            "orig_out": None if l.orig_out is None else [int(i) for i in l.orig_out],
            "orig_in": None if l.orig_in is None else [int(i) for i in l.orig_in],
        })
    stages = [{
        "stage_id": s.stage_id, "width": s.width,
        "projection_id": s.projection_id,
        "blocks": [{"path": list(b.path), "add_id": b.add_id} for b in s.blocks],
    } for s in g.stages]
    tensors = [{
        "layer": lid, "group": group, "name": name,
        "shape": list(arr.shape), "dtype": str(arr.dtype),
    } for lid, group, name, arr in _tensor_entries(g)]
    return {
        "layers": layers, "stages": stages, "head_id": g.head_id,
        "input_shape": list(g.input_shape), "dtype": g.dtype,
        "state": {
            "lam": state.lam, "epoch": state.epoch, "iteration": state.iteration,
            "batch_size": state.batch_size, "base_batch_size": state.base_batch_size,
            "lr": state.lr, "base_lr": state.base_lr,
        },
        "tensors": tensors,
    }


def save_checkpoint(g, state, path):
    header = json.dumps(_arch_header(g, state), sort_keys=True,
                        separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for _, _, _, arr in _tensor_entries(g):
            f.write(np.ascontiguousarray(arr, dtype=_DTYPES[str(arr.dtype)]).tobytes())


def load_checkpoint(path):
    """Returns (graph, state). Raises FormatError on any corruption; never
    returns a partially loaded model.
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic, not a checkpoint file", offset=0)
    if len(data) < 8:
        raise FormatError("truncated before version field", offset=4)
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if len(data) < 16:
        raise FormatError("truncated before header length", offset=8)
    (hlen,) = struct.unpack_from("<Q", data, 8)
    if len(data) < 16 + hlen:
        raise FormatError("truncated inside JSON header", offset=len(data))
    try:
        header = json.loads(data[16 : 16 + hlen].decode())
    except (ValueError, UnicodeDecodeError) as e:
        raise FormatError(f"unparseable JSON header: {e}", offset=16) from None

    layers = []
    for h in header["layers"]:
        layers.append(LayerSpec(
            id=h["id"], kind=h["kind"], inputs=list(h["inputs"]),
            in_channels=h["in_channels"], out_channels=h["out_channels"],
            kernel=h["kernel"], stride=h["stride"], pad=h["pad"],
            bn_eps=h["bn_eps"], bn_momentum=h["bn_momentum"],
            orig_out=None if h["orig_out"] is None else np.asarray(h["orig_out"]),
            orig_in=None if h["orig_in"] is None else np.asarray(h["orig_in"]),
        ))
    index = {l.id: l for l in layers}
    stages = [ResidualStage(
        stage_id=s["stage_id"], width=s["width"],
        projection_id=s["projection_id"],
        blocks=[Block(path=list(b["path"]), add_id=b["add_id"]) for b in s["blocks"]],
    ) for s in header["stages"]]

    offset = 16 + hlen
    for t in header["tensors"]:
        np_dt = _DTYPES.get(t["dtype"])
        if np_dt is None:
            raise FormatError(f"unknown tensor dtype {t['dtype']}", offset=offset)
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        nbytes = count * np.dtype(np_dt).itemsize
        if len(data) < offset + nbytes:
            raise FormatError(
                f"truncated tensor payload for layer {t['layer']} {t['name']}",
                offset=len(data),
            )
        arr = np.frombuffer(data[offset : offset + nbytes], dtype=np_dt)
        arr = arr.reshape(t["shape"]).copy()
        getattr(index[t["layer"]], t["group"])[t["name"]] = arr
        offset += nbytes
    if offset != len(data):
        raise FormatError("trailing bytes after declared tensors", offset=offset)

    g = ModelGraph(layers=layers, stages=stages, head_id=header["head_id"],
                   input_shape=tuple(header["input_shape"]), dtype=header["dtype"])
    s = header["state"]
    state = RunState(lam=s["lam"], epoch=s["epoch"], iteration=s["iteration"],
                     batch_size=s["batch_size"], base_batch_size=s["base_batch_size"],
                     lr=s["lr"], base_lr=s["base_lr"])
    return g, state
