import struct

import numpy as np
import pytest

from sepnet.arch import build_sepnet
from sepnet.compress import binarize_network, quantize8
from sepnet.graph import Network
from sepnet.store import (
    ModelFormatError,
    encode_records,
    export_descriptor,
    from_bytes,
    import_descriptor,
    load,
    save,
    size_report,
    to_bytes,
)


def one_conv(out_ch=1, in_ch=1, k=3, bias=False):
    net = Network("one", (in_ch, 5, 5))
    net.conv("c", "input", in_ch, out_ch, k, pad=k // 2, bias=bias)
    return net.initialize(0)


def test_f32_payload_is_four_bytes_per_weight():
    net = one_conv(out_ch=10, k=1)  # 10 float weights
    (key, rec), = encode_records(net)
    header = 2 + len(key) + 2 + 4 * 4
    assert len(rec) == header + 40


def test_bin1_payload_packs_signs():
    net, _ = binarize_network(one_conv(), "k>1")
    (key, rec), = encode_records(net)
    header = 2 + len(key) + 2 + 4 * 4
    assert len(rec) == header + 1 + 2 + 4  # scale-axes byte, ceil(9/8) sign bytes, one alpha


def test_q8_payload():
    net = quantize8(one_conv(out_ch=4, in_ch=2))
    (key, rec), = encode_records(net)
    assert len(rec) == 2 + len(key) + 2 + 16 + 1 + 4 + 72


def test_sign_bit_order():
    net = one_conv()
    net.weight_slot("c").value[:] = np.array([1, -1, -1, -1, -1, -1, -1, -1, 1.0]).reshape(1, 1, 3, 3)
    bnet, _ = binarize_network(net)
    (_, rec), = encode_records(bnet)
    assert rec[-6:-4] == bytes([0b00000001, 0b00000001])


def mixed(rng):
    net = build_sepnet("small", width=0.25, input_shape=(1, 16, 16), class_count=5).initialize(4)
    x = rng.normal(size=(8, 1, 16, 16)).astype(np.float32)
    net.forward(x, train=True)  # non-default running statistics
    return net, x


@pytest.mark.parametrize("stage", ["R", "B", "BQ"])
def test_roundtrip_inference_is_bitwise(tmp_path, rng, stage):
    net, x = mixed(rng)
    if stage != "R":
        net, _ = binarize_network(net)
    if stage == "BQ":
        net = quantize8(net)
    path = tmp_path / "m.sepn"
    n = save(net, path)
    assert n == path.stat().st_size
    again = load(path)
    assert again.state == net.state
    assert again.forward(x).tobytes() == net.forward(x).tobytes()
    for key, slot in net.params.items():
        assert again.params[key].encoding == slot.encoding
    save(again, tmp_path / "m2.sepn")
    assert (tmp_path / "m2.sepn").read_bytes() == path.read_bytes()


def test_loaded_patterns_stay_frozen(rng):
    net, _ = mixed(rng)
    bnet, _ = binarize_network(net)
    again = from_bytes(to_bytes(bnet))
    for key, slot in bnet.params.items():
        if slot.encoding == "BIN1":
            np.testing.assert_array_equal(again.params[key].pattern.signs, slot.pattern.signs)
            assert again.params[key].frozen_pattern


def test_kernel_granularity_roundtrip(rng):
    net, x = mixed(rng)
    bnet, _ = binarize_network(net, granularity="kernel")
    again = from_bytes(to_bytes(bnet))
    assert again.forward(x).tobytes() == bnet.forward(x).tobytes()


def test_bad_magic():
    data = bytearray(to_bytes(one_conv()))
    data[:4] = b"NOPE"
    with pytest.raises(ModelFormatError) as exc:
        from_bytes(bytes(data))
    assert exc.value.offset == 0


def test_bad_version():
    data = bytearray(to_bytes(one_conv()))
    data[4:6] = struct.pack("<H", 99)
    with pytest.raises(ModelFormatError) as exc:
        from_bytes(bytes(data))
    assert exc.value.offset == 4


def test_truncation_reports_offset():
    data = to_bytes(one_conv())
    for cut in (3, 10, len(data) - 1):
        with pytest.raises(ModelFormatError) as exc:
            from_bytes(data[:cut])
        assert "truncated" in str(exc.value) and 0 <= exc.value.offset <= cut


def test_trailing_bytes_rejected():
    with pytest.raises(ModelFormatError):
        from_bytes(to_bytes(one_conv()) + b"\0")


def test_save_is_atomic_on_failure(tmp_path, monkeypatch):
    path = tmp_path / "m.sepn"
    save(one_conv(), path)
    before = path.read_bytes()

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr("sepnet.store.os.replace", boom)
    with pytest.raises(OSError):
        save(one_conv(out_ch=3), path)
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["m.sepn"]


def test_descriptor_roundtrip(tmp_path):
    net = build_sepnet("large", width=0.25)
    export_descriptor(net, tmp_path / "d.json")
    assert import_descriptor(tmp_path / "d.json").describe() == net.describe()


def test_size_report_totals_equal_saved_bytes(tmp_path, rng):
    net, _ = mixed(rng)
    rep = size_report(net)
    assert rep.totals["R"] == save(net, tmp_path / "r.sepn")
    bnet, _ = binarize_network(net)
    assert rep.totals["B"] == save(bnet, tmp_path / "b.sepn")
    assert rep.totals["BQ"] == save(quantize8(bnet), tmp_path / "bq.sepn")
    assert rep.totals["R"] > rep.totals["B"] > rep.totals["BQ"]
    lines = rep.to_tsv().splitlines()
    assert lines[0] == "layer\tR\tB\tBQ" and lines[-1].startswith("TOTAL\t")
