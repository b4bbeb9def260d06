"""Where the parameters and bytes of a pattern network go.

Run: python demos/02_parameter_budget.py
"""
from sepnet.arch import RESNET_DEPTHS, build_resnet_cifar, build_sepnet, conv_weight_count, count_params
from sepnet.compress import binarize_network
from sepnet.store import size_report

# Group convolution divides the weight count by the number of groups.
print("256->256 3x3, 1 group :", conv_weight_count(256, 256, 3))
print("256->256 3x3, 4 groups:", conv_weight_count(256, 256, 3, 4))
print("depthwise (256 groups):", conv_weight_count(256, 256, 3, 256))

# CIFAR ResNets, full precision vs pattern networks. Counting one scale per
# binarized 3x3 kernel leaves the 1x1 shortcuts, BN and classifier dominant.
print("\ndepth  full     pattern")
for depth in RESNET_DEPTHS:
    net = build_resnet_cifar(depth)
    bnet, _ = binarize_network(net, granularity="kernel")
    print(f"{depth:5d}  {count_params(net):7d}  {count_params(bnet, 'effective'):7d}")

# SEP-Nets: the two variants differ in conv4/conv5 grouping and width.
for variant in ("small", "large"):
    net = build_sepnet(variant)
    print(f"\nSEP-Net-{variant}: {count_params(net):,} parameters")
    rep = size_report(net)
    for tag in ("R", "B", "BQ"):
        print(f"  {tag:2s} {rep.totals[tag] / 1e6:6.2f} MB")

# Per-layer bytes, heaviest first.
rep = size_report(build_sepnet("small"))
print("\nlargest layers of SEP-Net-small (bytes R / B / BQ):")
for name, r, b, q in sorted(rep.rows, key=lambda row: -row[1])[:6]:
    print(f"  {name:16s} {r:8d} {b:8d} {q:8d}")
