"""A look inside the .sepn model file.

Run: python demos/04_file_format.py
"""
import struct
import tempfile
from pathlib import Path

import numpy as np

from sepnet.compress import binarize_network, quantize8
from sepnet.graph import Network
from sepnet.store import encode_records, load, save

net = Network("tiny", (1, 5, 5), class_count=2)
x = net.conv("c", "input", 1, 2, 3, pad=1)
net.add("Linear", "fc", net.add("GlobalAvgPool", "pool", x), in_features=2, out_features=2)
net.initialize(0)

for label, variant in (("float32", net), ("binarized", binarize_network(net)[0]),
                       ("binarized + 8-bit", quantize8(binarize_network(net)[0]))):
    print(f"\n{label}:")
    for key, rec in encode_records(variant):
        print(f"  {key:8s} {len(rec):4d} bytes  {rec[:24].hex(' ')}{' ...' if len(rec) > 24 else ''}")

path = Path(tempfile.mkdtemp()) / "tiny.sepn"
n = save(binarize_network(net)[0], path)
raw = path.read_bytes()
magic, version, dlen = raw[:4], *struct.unpack("<HI", raw[4:10])
print(f"\n{path.name}: {n} bytes, magic {magic!r}, version {version}, descriptor {dlen} bytes")
print(raw[10:10 + dlen].decode()[:120], "...")

again = load(path)
xin = np.random.default_rng(1).normal(size=(3, 1, 5, 5)).astype(np.float32)
print("reloaded output identical:", again.forward(xin).tobytes() == binarize_network(net)[0].forward(xin).tobytes())
