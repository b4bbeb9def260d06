"""Pattern Residual Blocks, SEP-Net modules and networks, CIFAR ResNets.

Builders return :class:`~sepnet.graph.Network` objects with zero-initialised
weights; call ``net.initialize(seed)`` before training.
"""
from __future__ import annotations

from dataclasses import dataclass

from .graph import INPUT, GraphError, Network


@dataclass(frozen=True)
class PRBSpec:
    in_ch: int
    out_ch: int
    k: int = 3
    groups: int = 1
    pad: int | None = None  # defaults to (k - 1) // 2
    stride: int = 1

    @property
    def kpad(self) -> int:
        return (self.k - 1) // 2 if self.pad is None else self.pad


@dataclass(frozen=True)
class SepModuleSpec:
    in_ch: int
    reduce_ch: int
    prb1_ch: int
    prb2_ch: int
    out_ch: int
    groups: int = 4
    skip: bool = True
    reduce_groups: int = 1
    recover_groups: int = 1
    k: int = 3

    def channel_trace(self) -> list[int]:
        return [self.in_ch, self.reduce_ch, self.prb1_ch, self.prb2_ch, self.out_ch]


def add_prb(net: Network, x: str, name: str, spec: PRBSpec) -> str:
    """Append ``C_kxk(x) + C_1x1(x)``; returns the id of the sum node."""
    if spec.k <= 1:
        raise GraphError(f"{name}: PRB pattern branch needs k > 1, got {spec.k}")
    if 2 * spec.kpad != spec.k - 1:
        # the 1x1 branch (pad 0) only matches a 'same'-padded k x k branch
        raise GraphError(f"{name}: pad {spec.kpad} makes the {spec.k}x{spec.k} and 1x1 branches differ in size")
    kk = net.conv(f"{name}_{spec.k}x{spec.k}", x, spec.in_ch, spec.out_ch, spec.k,
                  pad=spec.kpad, stride=spec.stride, groups=spec.groups)
    one = net.conv(f"{name}_1x1", x, spec.in_ch, spec.out_ch, 1,
                   stride=spec.stride, groups=spec.groups)
    return net.add("Add", f"{name}_sum", [kk, one])


def build_prb(spec: PRBSpec, input_hw=(8, 8)) -> Network:
    """Standalone network holding a single PRB (no normalization)."""
    net = Network("prb", (spec.in_ch, *input_hw))
    add_prb(net, INPUT, "prb", spec)
    net.validate()
    return net


def _conv_bn(net, name, x, in_ch, out_ch, k, pad=0, stride=1, groups=1, role="block", relu=True):
    y = net.conv(name, x, in_ch, out_ch, k, pad=pad, stride=stride, groups=groups, role=role)
    y = net.bn(f"{name}_bn", y, out_ch)
    return net.relu(f"{name}_relu", y) if relu else y


def add_sep_module(net: Network, x: str, name: str, spec: SepModuleSpec) -> str:
    """1x1 reduce -> PRB -> PRB -> 1x1 recover, each followed by BN (+ReLU).

    With ``skip`` the recovered map is added to the module input before the
    final ReLU.
    """
    if spec.skip and spec.out_ch != spec.in_ch:
        raise GraphError(f"{name}: identity skip needs out_ch == in_ch, got {spec.in_ch} -> {spec.out_ch}")
    y = _conv_bn(net, f"{name}_svd1", x, spec.in_ch, spec.reduce_ch, 1, groups=spec.reduce_groups)
    for i, (cin, cout) in enumerate([(spec.reduce_ch, spec.prb1_ch), (spec.prb1_ch, spec.prb2_ch)], 1):
        y = add_prb(net, y, f"{name}_slice{i}", PRBSpec(cin, cout, spec.k, spec.groups))
        y = net.relu(f"{name}_slice{i}_relu", net.bn(f"{name}_slice{i}_bn", y, cout))
    y = _conv_bn(net, f"{name}_svd2", y, spec.prb2_ch, spec.out_ch, 1,
                 groups=spec.recover_groups, relu=False)
    if spec.skip:
        y = net.add("Add", f"{name}_skip", [y, x])
    return net.relu(f"{name}_out", y)


def build_sepnet_module(spec: SepModuleSpec, input_hw=(8, 8)) -> Network:
    net = Network("sep-module", (spec.in_ch, *input_hw))
    add_sep_module(net, INPUT, "m", spec)
    net.validate()
    return net


# Layer tables: (name, #channel, kernel, pad, stride, #group).
_SEPNET_LARGE = [
    ("conv1", 64, 5, 1, 2, 1),
    ("m1_svd1", 32, 1, 0, 1, 1), ("m1_slice1_1x1", 32, 1, 0, 1, 4), ("m1_slice1_3x3", 32, 3, 1, 1, 4),
    ("m1_slice2_1x1", 16, 1, 0, 1, 4), ("m1_slice2_3x3", 16, 3, 1, 1, 4), ("m1_svd2", 64, 1, 0, 1, 1),
    ("conv2", 128, 3, 1, 2, 1),
    ("m2_svd1", 64, 1, 0, 1, 1), ("m2_slice1_1x1", 64, 1, 0, 1, 4), ("m2_slice1_3x3", 64, 3, 1, 1, 4),
    ("m2_slice2_1x1", 32, 1, 0, 1, 4), ("m2_slice2_3x3", 32, 3, 1, 1, 4), ("m2_svd2", 128, 1, 0, 1, 1),
    ("conv3", 256, 3, 1, 2, 4),
    ("m3_svd1", 128, 1, 0, 1, 1), ("m3_slice1_1x1", 128, 1, 0, 1, 4), ("m3_slice1_3x3", 128, 3, 1, 1, 4),
    ("m3_slice2_1x1", 64, 1, 0, 1, 4), ("m3_slice2_3x3", 64, 3, 1, 1, 4), ("m3_svd2", 256, 1, 0, 1, 1),
    ("m4_svd1", 128, 1, 0, 1, 1), ("m4_slice1_1x1", 128, 1, 0, 1, 4), ("m4_slice1_3x3", 128, 3, 1, 1, 4),
    ("m4_slice2_1x1", 64, 1, 0, 1, 4), ("m4_slice2_3x3", 64, 3, 1, 1, 4), ("m4_svd2", 256, 1, 0, 1, 1),
    ("conv4", 256, 3, 1, 2, 1),
    ("m5_svd1", 128, 1, 0, 1, 4), ("m5_slice1_1x1", 128, 1, 0, 1, 4), ("m5_slice1_3x3", 128, 3, 1, 1, 4),
    ("m5_slice2_1x1", 64, 1, 0, 1, 4), ("m5_slice2_3x3", 64, 3, 1, 1, 4), ("m5_svd2", 256, 1, 0, 1, 1),
    ("m6_svd1", 128, 1, 0, 1, 1), ("m6_slice1_1x1", 128, 1, 0, 1, 4), ("m6_slice1_3x3", 128, 3, 1, 1, 4),
    ("m6_slice2_1x1", 64, 1, 0, 1, 4), ("m6_slice2_3x3", 64, 3, 1, 1, 4), ("m6_svd2", 256, 1, 0, 1, 1),
    ("conv5", 400, 3, 1, 2, 4),
]

_SEPNET_SMALL = [
    ("conv1", 64, 5, 1, 2, 1),
    ("m1_svd1", 32, 1, 0, 1, 1), ("m1_slice1_1x1", 32, 1, 0, 1, 4), ("m1_slice1_3x3", 32, 3, 1, 1, 4),
    ("m1_slice2_1x1", 16, 1, 0, 1, 4), ("m1_slice2_3x3", 16, 3, 1, 1, 4), ("m1_svd2", 64, 1, 0, 1, 1),
    ("conv2", 128, 3, 1, 2, 1),
    ("m2_svd1", 64, 1, 0, 1, 1), ("m2_slice1_1x1", 64, 1, 0, 1, 4), ("m2_slice1_3x3", 64, 3, 1, 1, 4),
    ("m2_slice2_1x1", 32, 1, 0, 1, 4), ("m2_slice2_3x3", 32, 3, 1, 1, 4), ("m2_svd2", 128, 1, 0, 1, 1),
    ("conv3", 256, 3, 1, 2, 4),
    ("m3_svd1", 128, 1, 0, 1, 1), ("m3_slice1_1x1", 128, 1, 0, 1, 4), ("m3_slice1_3x3", 128, 3, 1, 1, 4),
    ("m3_slice2_1x1", 64, 1, 0, 1, 4), ("m3_slice2_3x3", 64, 3, 1, 1, 4), ("m3_svd2", 256, 1, 0, 1, 1),
    ("m4_svd1", 128, 1, 0, 1, 1), ("m4_slice1_1x1", 128, 1, 0, 1, 4), ("m4_slice1_3x3", 128, 3, 1, 1, 4),
    ("m4_slice2_1x1", 64, 1, 0, 1, 4), ("m4_slice2_3x3", 64, 3, 1, 1, 4), ("m4_svd2", 256, 1, 0, 1, 1),
    ("conv4", 256, 3, 1, 2, 4),
    ("m5_svd1", 128, 1, 0, 1, 1), ("m5_slice1_1x1", 128, 1, 0, 1, 4), ("m5_slice1_3x3", 128, 3, 1, 1, 4),
    ("m5_slice2_1x1", 64, 1, 0, 1, 4), ("m5_slice2_3x3", 64, 3, 1, 1, 4), ("m5_svd2", 256, 1, 0, 1, 1),
    ("m6_svd1", 128, 1, 0, 1, 1), ("m6_slice1_1x1", 128, 1, 0, 1, 4), ("m6_slice1_3x3", 128, 3, 1, 1, 4),
    ("m6_slice2_1x1", 64, 1, 0, 1, 4), ("m6_slice2_3x3", 64, 3, 1, 1, 4), ("m6_svd2", 256, 1, 0, 1, 1),
    ("conv5", 512, 3, 1, 2, 16),
]

SEPNET_TABLES = {"large": _SEPNET_LARGE, "small": _SEPNET_SMALL}


def sepnet_table(variant: str) -> list[tuple]:
    try:
        return list(SEPNET_TABLES[variant])
    except KeyError:
        raise ValueError(f"unknown SEP-Net variant {variant!r}; use 'large' or 'small'") from None


def build_sepnet(variant: str = "small", width: float = 1.0, input_shape=(3, 224, 224),
                 class_count: int = 1000) -> Network:
    """SEP-Net built row by row from its layer table.

    ``width`` scales every channel count (0.5 gives the channel-halved
    desk-scale variant); scaled counts must stay divisible by their groups.
    The head is global average pooling followed by one Linear layer.
    """
    rows = sepnet_table(variant)
    net = Network(f"sepnet-{variant}" + ("" if width == 1.0 else f"-w{width:g}"), input_shape, class_count)

    def ch(c):
        return max(1, int(round(c * width)))

    x, c = INPUT, input_shape[0]
    i = 0
    while i < len(rows):
        name, out, k, pad, stride, groups = rows[i]
        if name.startswith("conv"):
            role = "stem" if name == "conv1" else "transition"
            x = _conv_bn(net, name, x, c, ch(out), k, pad, stride, groups, role=role)
            c = ch(out)
            i += 1
            continue
        mod = {r[0].split("_", 1)[1]: r for r in rows[i:i + 6]}
        prefix = name.split("_", 1)[0]
        if set(mod) != {"svd1", "slice1_1x1", "slice1_3x3", "slice2_1x1", "slice2_3x3", "svd2"}:
            raise GraphError(f"malformed module rows at {name}")
        g1, g2 = mod["slice1_3x3"][5], mod["slice2_3x3"][5]
        if g1 != g2 or mod["slice1_1x1"][5] != g1 or mod["slice2_1x1"][5] != g2:
            raise GraphError(f"{prefix}: PRB branches with different group counts")
        spec = SepModuleSpec(
            in_ch=c, reduce_ch=ch(mod["svd1"][1]), prb1_ch=ch(mod["slice1_3x3"][1]),
            prb2_ch=ch(mod["slice2_3x3"][1]), out_ch=ch(mod["svd2"][1]), groups=g1,
            skip=ch(mod["svd2"][1]) == c, reduce_groups=mod["svd1"][5], recover_groups=mod["svd2"][5])
        x = add_sep_module(net, x, prefix, spec)
        c = spec.out_ch
        i += 6
    x = net.add("GlobalAvgPool", "pool", x)
    net.add("Linear", "fc", x, in_features=c, out_features=class_count, bias=True)
    net.validate()
    return net


RESNET_DEPTHS = (20, 32, 44, 56)


def build_resnet_cifar(depth: int = 20, shortcut: str = "conv3", class_count: int = 10,
                       input_shape=(3, 32, 32)) -> Network:
    """CIFAR ResNet (6n+2 layers, 16/32/64 channel stages).

    ``shortcut`` picks the downsampling shortcut between stages:
    ``"conv3"`` (strided 3x3 projection + BN), ``"conv1"`` (strided 1x1
    projection + BN) or ``"pad"`` (parameter-free subsample and zero-pad).
    """
    if depth not in RESNET_DEPTHS:
        raise ValueError(f"unsupported ResNet depth {depth}; choose from {RESNET_DEPTHS}")
    if shortcut not in ("conv3", "conv1", "pad"):
        raise ValueError(f"unknown shortcut type {shortcut!r}")
    n = (depth - 2) // 6
    net = Network(f"resnet{depth}", input_shape, class_count)
    x = _conv_bn(net, "conv1", INPUT, input_shape[0], 16, 3, pad=1, role="stem")
    c = 16
    for stage, width in enumerate((16, 32, 64), 1):
        for b in range(n):
            name = f"s{stage}b{b}"
            stride = 2 if (b == 0 and stage > 1) else 1
            y = _conv_bn(net, f"{name}_conv1", x, c, width, 3, pad=1, stride=stride)
            y = _conv_bn(net, f"{name}_conv2", y, width, width, 3, pad=1, relu=False)
            if stride == 1 and c == width:
                sc = x
            elif shortcut == "pad":
                sc = net.add("Downsample", f"{name}_down", x, stride=stride, out_ch=width)
            else:
                k = 3 if shortcut == "conv3" else 1
                sc = _conv_bn(net, f"{name}_proj", x, c, width, k, pad=k // 2, stride=stride,
                              role="shortcut", relu=False)
            x = net.relu(f"{name}_out", net.add("Add", f"{name}_add", [y, sc]))
            c = width
    x = net.add("GlobalAvgPool", "pool", x)
    net.add("Linear", "fc", x, in_features=c, out_features=class_count, bias=True)
    net.validate()
    return net


def conv_weight_count(in_ch: int, out_ch: int, k: int, groups: int = 1) -> int:
    """k*k*a*b/N weights for an a->b convolution split into N groups."""
    if in_ch % groups or out_ch % groups:
        raise ValueError(f"channels {in_ch}->{out_ch} not divisible by {groups} groups")
    return k * k * (in_ch // groups) * out_ch


def count_params(net: Network, mode: str = "full") -> int:
    """Number of stored real parameters.

    ``"full"`` counts every weight, bias and batch-norm affine entry
    (running statistics are buffers, not parameters). ``"effective"`` counts
    a binarized slot as its number of scales.
    """
    if mode not in ("full", "effective"):
        raise ValueError(f"mode must be 'full' or 'effective', not {mode!r}")
    total = 0
    for slot in net.params.values():
        if mode == "effective" and slot.encoding == "BIN1":
            total += slot.pattern.n_scales
        else:
            total += slot.value.size
    return total


def param_table(net: Network) -> list[tuple[str, str, int, int]]:
    """(slot, encoding, full count, effective count) per parameter slot."""
    rows = []
    for key, slot in net.params.items():
        eff = slot.pattern.n_scales if slot.encoding == "BIN1" else slot.value.size
        rows.append((key, slot.encoding, slot.value.size, eff))
    return rows
