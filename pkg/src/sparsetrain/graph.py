"""Architecture representation for sequential and shortcut toy CNNs.

A ModelGraph is an ordered, topologically sorted list of LayerSpecs plus
residual-stage bookkeeping. Pruning rewrites this object; everything else
(execution, cost models, regularizer) reads it.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, DimensionError

MODEL_INPUT = -1

CONV, BN, RELU, POOL, LINEAR, ADD = "conv", "bn", "relu", "pool", "linear", "add"
PARAM_KINDS = (CONV, LINEAR)
# kinds whose output shares the channel class of their input
PASSTHROUGH_KINDS = (BN, RELU, POOL, ADD)


@dataclass
class LayerSpec:
    id: int
    kind: str
    inputs: list  # producer layer ids, MODEL_INPUT for the data tensor
    in_channels: int
    out_channels: int
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    params: dict = field(default_factory=dict)     # learnable tensors
    buffers: dict = field(default_factory=dict)    # BN running stats
    momentum: dict = field(default_factory=dict)   # SGD momentum, keyed like params
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    # original channel indices surviving in this layer (conv/linear/bn)
    orig_out: np.ndarray = None
    orig_in: np.ndarray = None


@dataclass
class Block:
    path: list        # layer ids of the residual path, in order
    add_id: int


@dataclass
class ResidualStage:
    stage_id: int
    width: int
    blocks: list
    projection_id: int = None  # 1x1 conv layer id, when the stage entry projects


@dataclass
class ModelGraph:
    layers: list
    stages: list
    head_id: int
    input_shape: tuple  # (C, H, W)
    dtype: str = "float32"

    def layer(self, lid):
        return self._index()[lid]

    def _index(self):
        return {l.id: l for l in self.layers}

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def param_count(self):
        return sum(int(t.size) for l in self.layers for t in l.params.values())

    def clone(self):
        return copy.deepcopy(self)


def _he_normal(rng, shape, fan_in, dtype):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class _Builder:
    def __init__(self, dtype, seed):
        self.layers = []
        self.rng = np.random.default_rng(seed)
        self.dtype = np.float32 if dtype == "float32" else np.float64
        self.next_id = 0

    def _add(self, layer):
        self.layers.append(layer)
        return layer.id

    def _new_id(self):
        i = self.next_id
        self.next_id += 1
        return i

    def conv(self, src, c_in, c_out, kernel, stride, pad):
        lid = self._new_id()
        w = _he_normal(self.rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel, self.dtype)
        return self._add(LayerSpec(
            id=lid, kind=CONV, inputs=[src], in_channels=c_in, out_channels=c_out,
            kernel=kernel, stride=stride, pad=pad,
            params={"w": w}, momentum={"w": np.zeros_like(w)},
            orig_out=np.arange(c_out), orig_in=np.arange(c_in),
        ))

    def bn(self, src, channels):
        lid = self._new_id()
        dt = self.dtype
        return self._add(LayerSpec(
            id=lid, kind=BN, inputs=[src], in_channels=channels, out_channels=channels,
            params={"gamma": np.ones(channels, dtype=dt), "beta": np.zeros(channels, dtype=dt)},
            buffers={"run_mean": np.zeros(channels, dtype=dt), "run_var": np.ones(channels, dtype=dt)},
            momentum={"gamma": np.zeros(channels, dtype=dt), "beta": np.zeros(channels, dtype=dt)},
            orig_out=np.arange(channels),
        ))

    def relu(self, src, channels):
        return self._add(LayerSpec(
            id=self._new_id(), kind=RELU, inputs=[src],
            in_channels=channels, out_channels=channels,
        ))

    def pool(self, src, channels):
        return self._add(LayerSpec(
            id=self._new_id(), kind=POOL, inputs=[src],
            in_channels=channels, out_channels=channels,
        ))

    def add(self, a, b, channels):
        return self._add(LayerSpec(
            id=self._new_id(), kind=ADD, inputs=[a, b],
            in_channels=channels, out_channels=channels,
        ))

    def linear(self, src, d_in, d_out):
        lid = self._new_id()
        w = _he_normal(self.rng, (d_out, d_in), d_in, self.dtype)
        b = np.zeros(d_out, dtype=self.dtype)
        return self._add(LayerSpec(
            id=lid, kind=LINEAR, inputs=[src], in_channels=d_in, out_channels=d_out,
            params={"w": w, "b": b},
            momentum={"w": np.zeros_like(w), "b": np.zeros_like(b)},
            orig_out=np.arange(d_out), orig_in=np.arange(d_in),
        ))


def build_toy_resnet(stages, input_shape=(3, 32, 32), classes=10,
                     bottleneck=False, dtype="float32", seed=0):
    """Residual network: conv-BN-ReLU stem, stages of residual blocks with
    identity shortcuts, strided 1x1 projection between stages, global
    average pool and a linear head.

    stages: list of (block_count, width) pairs.
    """
    if not stages or any(b < 1 or w < 1 for b, w in stages):
        raise ConfigurationError(f"invalid stage config {stages}")
    b = _Builder(dtype, seed)
    c_in = input_shape[0]
    w0 = stages[0][1]

    stem = b.conv(MODEL_INPUT, c_in, w0, kernel=3, stride=1, pad=1)
    node = b.relu(b.bn(stem, w0), w0)
    node_w = w0

    stage_list = []
    for si, (blocks, width) in enumerate(stages):
        stage_blocks = []
        projection_id = None
        for bi in range(blocks):
            stride = 2 if (si > 0 and bi == 0) else 1
            path = []
            if bottleneck:
                c1 = b.conv(node, node_w, width, kernel=1, stride=1, pad=0)
                r1 = b.relu(b.bn(c1, width), width)
                c2 = b.conv(r1, width, width, kernel=3, stride=stride, pad=1)
                r2 = b.relu(b.bn(c2, width), width)
                c3 = b.conv(r2, width, width, kernel=1, stride=1, pad=0)
                bn3 = b.bn(c3, width)
                path = [c1, c1 + 1, r1, c2, c2 + 1, r2, c3, bn3]
                path_out = bn3
            else:
                c1 = b.conv(node, node_w, width, kernel=3, stride=stride, pad=1)
                r1 = b.relu(b.bn(c1, width), width)
                c2 = b.conv(r1, width, width, kernel=3, stride=1, pad=1)
                bn2 = b.bn(c2, width)
                path = [c1, c1 + 1, r1, c2, bn2]
                path_out = bn2
            if bi == 0 and si > 0:
                proj = b.conv(node, node_w, width, kernel=1, stride=stride, pad=0)
                proj_bn = b.bn(proj, width)
                projection_id = proj
                shortcut = proj_bn
            else:
                shortcut = node
            add_id = b.add(path_out, shortcut, width)
            node = b.relu(add_id, width)
            node_w = width
            stage_blocks.append(Block(path=path, add_id=add_id))
        stage_list.append(ResidualStage(
            stage_id=si, width=width, blocks=stage_blocks, projection_id=projection_id,
        ))

    pool = b.pool(node, node_w)
    head = b.linear(pool, node_w, classes)
    return ModelGraph(layers=b.layers, stages=stage_list, head_id=head,
                      input_shape=tuple(input_shape), dtype=dtype)


def build_toy_vgg(widths, input_shape=(3, 32, 32), classes=10,
                  dtype="float32", seed=0):
    """Sequential conv-BN-ReLU chain (stride-2 at each width increase for
    downsampling), global average pool, linear head. No residual stages.
    """
    if not widths or any(w < 1 for w in widths):
        raise ConfigurationError(f"invalid widths {widths}")
    b = _Builder(dtype, seed)
    prev_c = input_shape[0]
    node = MODEL_INPUT
    for i, w in enumerate(widths):
        stride = 2 if (i > 0 and w != widths[i - 1]) else 1
        conv = b.conv(node, prev_c, w, kernel=3, stride=stride, pad=1)
        node = b.relu(b.bn(conv, w), w)
        prev_c = w
    pool = b.pool(node, prev_c)
    head = b.linear(pool, prev_c, classes)
    return ModelGraph(layers=b.layers, stages=[], head_id=head,
                      input_shape=tuple(input_shape), dtype=dtype)


def validate_graph(g):
    """Returns a list of violation strings; empty means the graph is valid."""
    violations = []
    index = g._index()
    out_ch = {MODEL_INPUT: g.input_shape[0]}
    for layer in g.layers:
        for src in layer.inputs:
            if src not in out_ch:
                violations.append(f"layer {layer.id} reads unknown or later layer {src}")
                continue
            if out_ch[src] != layer.in_channels:
                violations.append(
                    f"layer {src} produces {out_ch[src]} channels but layer "
                    f"{layer.id} expects {layer.in_channels}"
                )
        if layer.kind == ADD and len(layer.inputs) == 2:
            a, bsrc = layer.inputs
            if a in out_ch and bsrc in out_ch and out_ch[a] != out_ch[bsrc]:
                violations.append(
                    f"add layer {layer.id} merges {out_ch[a]} and {out_ch[bsrc]} channels"
                )
        if layer.kind == CONV:
            k, c = layer.params["w"].shape[:2]
            if (k, c) != (layer.out_channels, layer.in_channels):
                violations.append(
                    f"conv {layer.id} weight shape {layer.params['w'].shape} "
                    f"!= ({layer.out_channels},{layer.in_channels},...)"
                )
        if layer.kind == BN and layer.params["gamma"].shape[0] != layer.out_channels:
            violations.append(
                f"bn {layer.id} param length {layer.params['gamma'].shape[0]} "
                f"!= {layer.out_channels} channels"
            )
        if layer.in_channels < 1 or layer.out_channels < 1:
            violations.append(f"layer {layer.id} has empty channel dimension")
        out_ch[layer.id] = layer.out_channels
    for stage in g.stages:
        for bi, block in enumerate(stage.blocks):
            last_conv = _last_conv_of_path(g, block.path)
            if index[last_conv].out_channels != stage.width:
                violations.append(
                    f"stage {stage.stage_id} block {bi} last conv {last_conv} "
                    f"out {index[last_conv].out_channels} != stage width {stage.width}"
                )
        if stage.projection_id is not None:
            if index[stage.projection_id].out_channels != stage.width:
                violations.append(
                    f"stage {stage.stage_id} projection out "
                    f"{index[stage.projection_id].out_channels} != width {stage.width}"
                )
    return violations


def _last_conv_of_path(g, path):
    index = g._index()
    for lid in reversed(path):
        if index[lid].kind == CONV:
            return lid
    raise ConfigurationError("residual path contains no conv layer")


def _first_conv_of_path(g, path):
    index = g._index()
    for lid in path:
        if index[lid].kind == CONV:
            return lid
    raise ConfigurationError("residual path contains no conv layer")


# ---------------------------------------------------------------------------
# channel classes: sets of layer sides that must share one retained-index list
# ---------------------------------------------------------------------------

@dataclass
class ChannelClass:
    root: int                 # representative token
    channels: int
    producers: list           # conv/linear layer ids whose output lives here
    consumers: list           # conv/linear layer ids reading this class
    bn_layers: list           # bn layer ids with per-channel params here
    other_layers: list        # relu/pool/add ids inside the class
    has_model_input: bool = False
    is_head_output: bool = False


@dataclass
class ClassPartition:
    classes: dict   # root token -> ChannelClass
    root_of: dict   # layer id (or MODEL_INPUT) -> root token of its output class

    def out_root(self, lid):
        return self.root_of[lid]

    def in_root(self, g, lid):
        return self.root_of[g.layer(lid).inputs[0]]


def channel_classes(g):
    """Partition data edges into channel classes via union-find.

    conv/linear break the chain (fresh output class); bn/relu/pool/add keep
    their input's class; add additionally merges both input classes.
    Returns a ClassPartition. Tokens are layer ids, with MODEL_INPUT for
    the data tensor.
    """
    parent = {MODEL_INPUT: MODEL_INPUT}

    def find(t):
        while parent[t] != t:
            parent[t] = parent[parent[t]]
            t = parent[t]
        return t

    def union(a, b):
        parent[find(a)] = find(b)

    for layer in g.layers:
        parent[layer.id] = layer.id
    for layer in g.layers:
        if layer.kind in PASSTHROUGH_KINDS:
            for src in layer.inputs:
                union(layer.id, src)

    classes = {}

    def get(root, channels):
        if root not in classes:
            classes[root] = ChannelClass(
                root=root, channels=channels, producers=[], consumers=[],
                bn_layers=[], other_layers=[],
            )
        return classes[root]

    input_root = find(MODEL_INPUT)
    get(input_root, g.input_shape[0]).has_model_input = True
    for layer in g.layers:
        root = find(layer.id)
        cls = get(root, layer.out_channels)
        if layer.kind in PARAM_KINDS:
            cls.producers.append(layer.id)
            in_cls = get(find(layer.inputs[0]), layer.in_channels)
            in_cls.consumers.append(layer.id)
        elif layer.kind == BN:
            cls.bn_layers.append(layer.id)
        else:
            cls.other_layers.append(layer.id)
    classes[find(g.head_id)].is_head_output = True
    root_of = {MODEL_INPUT: input_root}
    for layer in g.layers:
        root_of[layer.id] = find(layer.id)
    return ClassPartition(classes=classes, root_of=root_of)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def layer_output_shapes(g):
    """Per-layer output shape (without the batch dimension)."""
    shapes = {MODEL_INPUT: tuple(g.input_shape)}
    for layer in g.layers:
        src = shapes[layer.inputs[0]]
        if layer.kind == CONV:
            _, h, w = src
            ho = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
            wo = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
            if ho < 1 or wo < 1:
                raise ConfigurationError(
                    f"conv {layer.id} produces empty spatial extent {ho}x{wo}"
                )
            shapes[layer.id] = (layer.out_channels, ho, wo)
        elif layer.kind == POOL:
            shapes[layer.id] = (layer.out_channels,)
        elif layer.kind == LINEAR:
            shapes[layer.id] = (layer.out_channels,)
        else:
            shapes[layer.id] = (layer.out_channels,) + src[1:]
    return shapes


def forward(g, x, training=True, want_cache=False):
    """Run the graph on a batch x (N,C,H,W). Returns logits, or
    (logits, cache) when want_cache is set. Running BN stats are updated
    in training mode.
    """
    if x.shape[1:] != tuple(g.input_shape):
        raise DimensionError(
            f"input shape {x.shape[1:]} != model input {g.input_shape}"
        )
    values = {MODEL_INPUT: x}
    cache = {}
    for layer in g.layers:
        src = values[layer.inputs[0]]
        if layer.kind == CONV:
            if want_cache:
                out, cols = kernels.conv2d_forward_cols(
                    src, layer.params["w"], layer.stride, layer.pad
                )
                cache[layer.id] = cols
            else:
                out = kernels.conv2d_forward(
                    src, layer.params["w"], layer.stride, layer.pad
                )
        elif layer.kind == BN:
            state = kernels.BatchNormState(
                gamma=layer.params["gamma"], beta=layer.params["beta"],
                running_mean=layer.buffers["run_mean"],
                running_var=layer.buffers["run_var"],
                epsilon=layer.bn_eps, momentum_coef=layer.bn_momentum,
            )
            out, bn_cache = kernels.batchnorm_forward(src, state, training=training)
            if want_cache:
                cache[layer.id] = bn_cache
        elif layer.kind == RELU:
            out = kernels.relu_forward(src)
        elif layer.kind == POOL:
            out = kernels.global_avgpool_forward(src)
        elif layer.kind == ADD:
            out = src + values[layer.inputs[1]]
        elif layer.kind == LINEAR:
            out = kernels.linear_forward(src, layer.params["w"], layer.params["b"])
        else:
            raise ConfigurationError(f"unknown layer kind {layer.kind!r}")
        values[layer.id] = out
    logits = values[g.head_id]
    if want_cache:
        return logits, (values, cache)
    return logits


def backward(g, cache, grad_logits):
    """Backprop grad_logits through the graph.

    cache is the (values, bn_caches) pair from forward(want_cache=True).
    Returns {layer_id: {param_name: grad}} for all learnable tensors.
    """
    values, bn_caches = cache
    grads_out = {g.head_id: grad_logits}
    param_grads = {}

    def accumulate(lid, grad):
        if lid == MODEL_INPUT:
            return
        if lid in grads_out:
            grads_out[lid] = grads_out[lid] + grad
        else:
            grads_out[lid] = grad

    for layer in reversed(g.layers):
        if layer.id not in grads_out:
            continue
        grad = grads_out.pop(layer.id)
        src_id = layer.inputs[0]
        src = values[src_id]
        if layer.kind == CONV:
            gx, gw = kernels.conv2d_backward(
                src, layer.params["w"], grad, layer.stride, layer.pad,
                cols=bn_caches.get(layer.id),
            )
            param_grads[layer.id] = {"w": gw}
            accumulate(src_id, gx)
        elif layer.kind == BN:
            gx, ggamma, gbeta = kernels.batchnorm_backward(bn_caches[layer.id], grad)
            param_grads[layer.id] = {"gamma": ggamma, "beta": gbeta}
            accumulate(src_id, gx)
        elif layer.kind == RELU:
            accumulate(src_id, kernels.relu_backward(src, grad))
        elif layer.kind == POOL:
            accumulate(src_id, kernels.global_avgpool_backward(src.shape, grad))
        elif layer.kind == ADD:
            accumulate(src_id, grad)
            accumulate(layer.inputs[1], grad)
        elif layer.kind == LINEAR:
            gx, gw, gb = kernels.linear_backward(src, layer.params["w"], grad)
            param_grads[layer.id] = {"w": gw, "b": gb}
            accumulate(src_id, gx)
    return param_grads
