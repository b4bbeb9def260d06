"""Static layer graph: forward/backward execution and the parameter registry."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ShapeError

KINDS = ("Conv", "ReLU", "BatchNorm", "Add", "GlobalAvgPool", "Linear", "Softmax", "Downsample")
INPUT = "input"


class GraphError(ValueError):
    """The layer graph is malformed or inconsistent with its input shape."""


class UsageError(RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: list[str]
    spec: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "inputs": list(self.inputs), "spec": dict(self.spec)}


@dataclass
class ParamSlot:
    """One named parameter tensor plus its storage encoding.

    ``value`` always holds the dense tensor used for compute. For ``BIN1``
    slots it is the reconstruction ``alpha * B`` and for ``Q8`` slots the
    dequantized codes; ``pattern`` / ``quant`` carry the compact payload.
    """

    owner: str
    name: str
    value: np.ndarray
    group: str = "weight"  # weight | bias | bn | head; drives weight-decay policy
    encoding: str = "F32"
    pattern: Any = None
    quant: Any = None
    frozen_pattern: bool = False

    @property
    def key(self) -> str:
        return f"{self.owner}.{self.name}"

    def __post_init__(self):
        if self.frozen_pattern and self.encoding != "BIN1":
            raise ValueError(f"{self.key}: frozen_pattern requires BIN1 encoding")

    def trainable_value(self) -> np.ndarray:
        """The array an optimizer updates: alpha for frozen patterns, else value."""
        return self.pattern.alpha if self.frozen_pattern else self.value

    def set_trainable_value(self, new: np.ndarray) -> None:
        if self.frozen_pattern:
            # alpha < 0 would silently flip the frozen pattern
            self.pattern.alpha = np.maximum(np.asarray(new, dtype=self.pattern.alpha.dtype), 0)
            self.value = self.pattern.reconstruct().astype(self.value.dtype)
        else:
            self.value = np.asarray(new, dtype=self.value.dtype)


class Network:
    """An ordered DAG of :class:`LayerNode` with owned parameters.

    Nodes may only reference the pseudo-node ``"input"`` or nodes declared
    before them, so declaration order is a valid topological order. The last
    node is the network output.
    """

    def __init__(self, name: str, input_shape, class_count: int | None = None):
        self.name = name
        self.input_shape = tuple(int(s) for s in input_shape)
        self.class_count = class_count
        self.nodes: list[LayerNode] = []
        self._index: dict[str, LayerNode] = {}
        self.params: dict[str, ParamSlot] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.state = "Full"
        self.dtype = np.dtype(np.float32)
        self._cache = None

    # -- construction ----------------------------------------------------
    def add(self, kind: str, id: str, inputs, **spec) -> str:
        if kind not in KINDS:
            raise GraphError(f"unknown layer kind {kind!r}")
        if id in self._index or id == INPUT:
            raise GraphError(f"duplicate node id {id!r}")
        inputs = [inputs] if isinstance(inputs, str) else list(inputs)
        for src in inputs:
            if src != INPUT and src not in self._index:
                raise GraphError(f"node {id!r} references unknown or later node {src!r}")
        node = LayerNode(id, kind, inputs, spec)
        self.nodes.append(node)
        self._index[id] = node
        self._make_params(node)
        return id

    def conv(self, id, x, in_ch, out_ch, k, pad=0, stride=1, groups=1, bias=False, role="block"):
        return self.add("Conv", id, x, in_ch=in_ch, out_ch=out_ch, k=k, pad=pad,
                        stride=stride, groups=groups, bias=bias, role=role)

    def bn(self, id, x, channels):
        return self.add("BatchNorm", id, x, channels=channels)

    def relu(self, id, x):
        return self.add("ReLU", id, x)

    def _make_params(self, node: LayerNode) -> None:
        s, dt = node.spec, self.dtype
        if node.kind == "Conv":
            if s["in_ch"] % s["groups"] or s["out_ch"] % s["groups"]:
                raise ConfigError(
                    f"{node.id}: channels {s['in_ch']}->{s['out_ch']} not divisible by groups {s['groups']}")
            shape = (s["out_ch"], s["in_ch"] // s["groups"], s["k"], s["k"])
            self._slot(node.id, "weight", np.zeros(shape, dt), "weight")
            if s.get("bias"):
                self._slot(node.id, "bias", np.zeros(s["out_ch"], dt), "bias")
        elif node.kind == "BatchNorm":
            c = s["channels"]
            self._slot(node.id, "gamma", np.ones(c, dt), "bn")
            self._slot(node.id, "beta", np.zeros(c, dt), "bn")
            self.buffers[f"{node.id}.running_mean"] = np.zeros(c, dt)
            self.buffers[f"{node.id}.running_var"] = np.ones(c, dt)
        elif node.kind == "Linear":
            self._slot(node.id, "weight", np.zeros((s["out_features"], s["in_features"]), dt), "head")
            if s.get("bias", True):
                self._slot(node.id, "bias", np.zeros(s["out_features"], dt), "head")

    def _slot(self, owner, name, value, group):
        slot = ParamSlot(owner, name, value, group)
        self.params[slot.key] = slot

    def initialize(self, seed: int = 0) -> "Network":
        """He-normal conv/linear weights, zero biases, identity batch norm."""
        rng = np.random.default_rng(seed)
        for node in self.nodes:
            s = node.spec
            if node.kind == "Conv":
                w = self.params[f"{node.id}.weight"]
                fan_in = w.value[0].size
                w.value = (rng.standard_normal(w.value.shape) * np.sqrt(2.0 / fan_in)).astype(self.dtype)
            elif node.kind == "Linear":
                w = self.params[f"{node.id}.weight"]
                w.value = (rng.standard_normal(w.value.shape) * np.sqrt(1.0 / s["in_features"])).astype(self.dtype)
        return self

    # -- queries ---------------------------------------------------------
    def node(self, id: str) -> LayerNode:
        return self._index[id]

    def conv_nodes(self) -> list[LayerNode]:
        return [n for n in self.nodes if n.kind == "Conv"]

    def weight_slot(self, node_id: str) -> ParamSlot:
        return self.params[f"{node_id}.weight"]

    @property
    def output_id(self) -> str:
        return self.nodes[-1].id

    def validate(self) -> dict[str, tuple]:
        """Infer every node's per-sample output shape; raise on inconsistency."""
        shapes: dict[str, tuple] = {INPUT: self.input_shape}
        if not self.nodes:
            raise GraphError("network has no nodes")
        for node in self.nodes:
            ins = [shapes[i] for i in node.inputs]
            shapes[node.id] = _infer_shape(node, ins)
        return shapes

    def copy(self) -> "Network":
        cache, self._cache = self._cache, None
        try:
            return copy.deepcopy(self)
        finally:
            self._cache = cache

    def astype(self, dtype) -> "Network":
        """Copy with every parameter and buffer cast to ``dtype``."""
        net = self.copy()
        net.dtype = np.dtype(dtype)
        for slot in net.params.values():
            slot.value = slot.value.astype(dtype)
            if slot.pattern is not None:
                slot.pattern.alpha = slot.pattern.alpha.astype(dtype)
        for k in net.buffers:
            net.buffers[k] = net.buffers[k].astype(dtype)
        return net

    # -- execution -------------------------------------------------------
    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"{self.name}: input shape {x.shape[1:]} != declared {self.input_shape}")
        x = np.asarray(x, dtype=self.dtype)
        acts = {INPUT: x}
        aux: dict[str, Any] = {}
        p, buf = self.params, self.buffers
        for node in self.nodes:
            s = node.spec
            a = acts[node.inputs[0]]
            k = node.kind
            if k == "Conv":
                bias = p[f"{node.id}.bias"].value if s.get("bias") else None
                out = T.conv2d(a, p[f"{node.id}.weight"].value, bias, s["pad"], s["stride"], s["groups"])
            elif k == "ReLU":
                out = T.relu(a)
            elif k == "BatchNorm":
                out, aux[node.id] = T.batchnorm2d(
                    a, p[f"{node.id}.gamma"].value, p[f"{node.id}.beta"].value,
                    buf[f"{node.id}.running_mean"], buf[f"{node.id}.running_var"],
                    train=train, momentum=s.get("momentum", 0.1), eps=s.get("eps", 1e-5))
            elif k == "Add":
                out = a
                for other in node.inputs[1:]:
                    out = T.add(out, acts[other])
            elif k == "GlobalAvgPool":
                out = T.avgpool_global(a)
            elif k == "Linear":
                bias = p[f"{node.id}.bias"].value if s.get("bias", True) else None
                out = T.linear(a, p[f"{node.id}.weight"].value, bias)
            elif k == "Softmax":
                out = T.softmax(a)
            elif k == "Downsample":
                out = T.downsample_pad(a, s["stride"], s["out_ch"])
            acts[node.id] = out
        self._cache = (acts, aux) if train else None
        return acts[self.output_id]

    def backward(self, grad_output: np.ndarray) -> dict[str, np.ndarray]:
        """Back-propagate ``dL/d(output)``; returns gradients keyed by slot key.

        Frozen-pattern slots receive the per-scale gradient ``dL/dalpha``
        instead of a dense weight gradient.
        """
        if self._cache is None:
            raise UsageError("backward() requires a preceding forward(..., train=True)")
        acts, aux = self._cache
        p = self.params
        grads = {k: np.zeros_like(s.value) for k, s in p.items()}
        g_act: dict[str, np.ndarray] = {self.output_id: grad_output}

        def push(src, g):
            if src == INPUT:
                return
            if src in g_act:
                g_act[src] = g_act[src] + g
            else:
                g_act[src] = g

        for node in reversed(self.nodes):
            g = g_act.pop(node.id, None)
            if g is None:
                continue
            s, k = node.spec, node.kind
            a = acts[node.inputs[0]]
            if k == "Conv":
                gx, gw, gb = T.conv2d_backward(g, a, p[f"{node.id}.weight"].value,
                                               s["pad"], s["stride"], s["groups"])
                grads[f"{node.id}.weight"] += gw
                if s.get("bias"):
                    grads[f"{node.id}.bias"] += gb
                push(node.inputs[0], gx)
            elif k == "ReLU":
                push(node.inputs[0], T.relu_backward(g, a))
            elif k == "BatchNorm":
                gx, gg, gbeta = T.batchnorm2d_backward(g, aux[node.id], p[f"{node.id}.gamma"].value)
                grads[f"{node.id}.gamma"] += gg
                grads[f"{node.id}.beta"] += gbeta
                push(node.inputs[0], gx)
            elif k == "Add":
                for src in node.inputs:
                    push(src, g)
            elif k == "GlobalAvgPool":
                push(node.inputs[0], T.avgpool_global_backward(g, a.shape))
            elif k == "Linear":
                gx, gw, gb = T.linear_backward(g, a, p[f"{node.id}.weight"].value)
                grads[f"{node.id}.weight"] += gw
                if s.get("bias", True):
                    grads[f"{node.id}.bias"] += gb
                push(node.inputs[0], gx)
            elif k == "Softmax":
                push(node.inputs[0], T.softmax_backward(g, acts[node.id]))
            elif k == "Downsample":
                push(node.inputs[0], T.downsample_pad_backward(g, a.shape, s["stride"]))
        for key, slot in p.items():
            if slot.frozen_pattern:
                grads[key] = slot.pattern.reduce_gradient(grads[key])
        return grads

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode logits, batched."""
        outs = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def describe(self) -> dict:
        return {
            "name": self.name,
            "state": self.state,
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "nodes": [n.to_dict() for n in self.nodes],
        }

    @classmethod
    def from_description(cls, desc: dict) -> "Network":
        net = cls(desc["name"], desc["input_shape"], desc.get("class_count"))
        for nd in desc["nodes"]:
            net.add(nd["kind"], nd["id"], nd["inputs"], **nd["spec"])
        net.state = desc.get("state", "Full")
        net.validate()
        return net


def _infer_shape(node: LayerNode, ins: list[tuple]) -> tuple:
    s, k = node.spec, node.kind
    if k in ("Add",):
        if len(ins) < 2 or any(i != ins[0] for i in ins):
            raise GraphError(f"{node.id}: Add operands have shapes {ins}")
        return ins[0]
    if len(ins) != 1:
        raise GraphError(f"{node.id}: {k} takes exactly one input, got {len(ins)}")
    (shape,) = ins
    if k in ("ReLU", "Softmax"):
        return shape
    if k == "BatchNorm":
        if len(shape) != 3 or shape[0] != s["channels"]:
            raise GraphError(f"{node.id}: BatchNorm({s['channels']}) on input {shape}")
        return shape
    if k == "GlobalAvgPool":
        if len(shape) != 3:
            raise GraphError(f"{node.id}: GlobalAvgPool on input {shape}")
        return (shape[0], 1, 1)
    if k == "Linear":
        feats = int(np.prod(shape))
        if feats != s["in_features"]:
            raise GraphError(f"{node.id}: Linear expects {s['in_features']} features, input {shape}")
        return (s["out_features"],)
    if k == "Downsample":
        c, h, w = shape
        if s["out_ch"] < c:
            raise GraphError(f"{node.id}: Downsample cannot reduce {c} -> {s['out_ch']} channels")
        return (s["out_ch"], -(-h // s["stride"]), -(-w // s["stride"]))
    if k == "Conv":
        if len(shape) != 3 or shape[0] != s["in_ch"]:
            raise GraphError(f"{node.id}: Conv expects {s['in_ch']} input channels, got {shape}")
        c, h, w = shape
        ho = T.conv_output_size(h, s["k"], s["pad"], s["stride"])
        wo = T.conv_output_size(w, s["k"], s["pad"], s["stride"])
        if ho < 1 or wo < 1:
            raise GraphError(f"{node.id}: kernel {s['k']} does not fit input {shape}")
        return (s["out_ch"], ho, wo)
    raise GraphError(f"unknown kind {k}")


def cross_entropy_softmax(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} / labels {labels.shape} mismatch")
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), labels] - logsum
    loss = float(-logp.mean())
    grad = np.exp(z - logsum[:, None])
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype, copy=False)


def forward(net: Network, x: np.ndarray, train: bool = False) -> np.ndarray:
    return net.forward(x, train=train)


def backward(net: Network, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
    return net.backward(loss_grad)
