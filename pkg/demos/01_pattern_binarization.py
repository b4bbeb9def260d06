"""Pattern binarization of single filters and of a whole network.

Run: python demos/01_pattern_binarization.py
"""
import itertools

import numpy as np

from sepnet.arch import build_sepnet
from sepnet.compress import binarize_filter, binarize_network, quantization_error_report

# A 1x2x2 filter. The closed form picks B = sign(W) and alpha = mean |W|.
w = np.array([0.5, -0.25, 0.75, -1.0]).reshape(1, 2, 2)
pattern, err = binarize_filter(w)
print("signs :", pattern.binary(np.float64).ravel())
print("alpha :", float(pattern.alpha))
print("error :", err)

# Brute force over all 16 sign patterns agrees.
best = min(
    np.sum((w.ravel() - (w.ravel() @ b / 4) * np.array(b)) ** 2)
    for b in itertools.product((-1.0, 1.0), repeat=4)
)
print("brute-force minimum:", best)

# Even for Gaussian weights the error per weight grows with kernel size.
rng = np.random.default_rng(0)
for k in (1, 3, 5):
    errs = [binarize_filter(rng.normal(size=(16, k, k)))[1] / (16 * k * k) for _ in range(200)]
    print(f"{k}x{k}: mean per-weight error {np.mean(errs):.4f}")

# Network level (freshly initialized weights): 3x3 filters inside SEP modules
# become sign patterns plus one scale each; 1x1 filters, the stem and the
# strided transitions stay float.
net = build_sepnet("small").initialize(0)
print(quantization_error_report(net).to_table())
bnet, report = binarize_network(net)
print(f"binarized {len(report.records)} layers:")
for rec in report.records[:4]:
    print(f"  {rec.layer:16s} k={rec.k} filters={rec.filters} mean error={rec.mean_error:.4f}")
print("  ...")
