"""Train, binarize, fine-tune and quantize a half-width SEP-Net on digits.

Takes a few minutes on a laptop CPU. Pass --quick for a much shorter run
(accuracy numbers then mean little).

Run: python demos/03_desk_pipeline.py [--quick]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from sepnet.arch import build_sepnet, count_params
from sepnet.compress import quantize8
from sepnet.store import load, save
from sepnet.train import AugmentSpec, DataSplits, desk_config, evaluate, load_digits, preprocess, run_pipeline

quick = "--quick" in sys.argv
iters = 40 if quick else 400

train, test = preprocess(*load_digits(size=32))
data = DataSplits(train, test, AugmentSpec(pad_pixels=4))
print(f"{len(train)} training / {len(test)} test images, shape {train.images.shape[1:]}")

net = build_sepnet("small", width=0.5, input_shape=(1, 32, 32), class_count=10).initialize(0)
print(f"half-width SEP-Net-small: {count_params(net):,} parameters")
cfg = desk_config(max_iter=iters, batch_size=64, finetune_iter=iters // 2)

out = Path(tempfile.mkdtemp(prefix="sepnet-demo-"))
with open(out / "train.log", "w") as log:
    full = run_pipeline(net, data, cfg, "full-train", checkpoint_dir=out, log_file=log)
    bi = run_pipeline(full.net, data, cfg, "binarize", checkpoint_dir=out)
    ref = run_pipeline(bi.net, data, cfg, "finetune", checkpoint_dir=out, log_file=log)
bq = quantize8(ref.net)
save(bq, out / "BQ.sepn")

print("\nstate      top-1   file bytes")
for name, metrics in (("Full", full.metrics), ("BiPattern", bi.metrics), ("Refined", ref.metrics),
                      ("BQ", evaluate(bq, test))):
    print(f"{name:10s} {metrics['top1']:.4f}  {(out / f'{name}.sepn').stat().st_size:9d}")

# Fine-tuning only moved the scales: every sign bit is where binarization put it.
a, b = load(out / "BiPattern.sepn"), load(out / "Refined.sepn")
same = all(np.array_equal(a.params[k].pattern.signs, b.params[k].pattern.signs)
           for k, s in a.params.items() if s.encoding == "BIN1")
print("\nsign patterns unchanged by fine-tuning:", same)
print("checkpoints and log in", out)
