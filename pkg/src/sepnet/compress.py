"""Pattern binarization of k x k filters, error analysis and 8-bit quantization.

A filter ``W`` is approximated by ``alpha * B`` with ``B`` in {-1, +1}. The
squared Frobenius error ``||W - alpha B||^2`` is minimized by taking
``B = sign(W)`` (with ``W == 0`` mapped to +1) and ``alpha = mean(|W|)``.
"""
from __future__ import annotations

import operator
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .graph import Network
from .tensor import ShapeError

# Roles of conv layers that live inside residual / SEP blocks. Stem, transition
# and shortcut convs stay full precision unless the caller widens the scope.
BLOCK_ROLES = ("block",)


@dataclass
class BinaryPattern:
    """Sign bits plus one non-negative scale per filter (or per k x k kernel).

    ``alpha`` covers the leading ``alpha.ndim`` axes of ``signs``; the
    remaining axes are the ones sharing a scale. For an OIHW weight,
    ``alpha.shape == (O,)`` is per-filter and ``(O, I)`` is per-kernel.
    """

    signs: np.ndarray  # bool, True means +1
    alpha: np.ndarray

    @property
    def granularity(self) -> str:
        return {1: "filter", 2: "kernel"}.get(self.alpha.ndim, "tensor")

    @property
    def n_scales(self) -> int:
        return int(self.alpha.size)

    def _alpha_b(self) -> np.ndarray:
        extra = self.signs.ndim - self.alpha.ndim
        return self.alpha.reshape(self.alpha.shape + (1,) * extra)

    def binary(self, dtype=np.float32) -> np.ndarray:
        return np.where(self.signs, 1, -1).astype(dtype)

    def reconstruct(self) -> np.ndarray:
        return self._alpha_b() * self.binary(self.alpha.dtype)

    def reduce_gradient(self, grad_weight: np.ndarray) -> np.ndarray:
        return alpha_gradient(grad_weight, self)


def _binarize(w: np.ndarray, lead: int) -> tuple[BinaryPattern, np.ndarray]:
    axes = tuple(range(lead, w.ndim))
    signs = w >= 0
    alpha = np.abs(w).mean(axis=axes) if axes else np.abs(w)
    pattern = BinaryPattern(signs, np.asarray(alpha, dtype=w.dtype))
    err = ((w - pattern.reconstruct()) ** 2).sum(axis=axes) if axes else (w - pattern.reconstruct()) ** 2
    return pattern, err


def binarize_filter(w: np.ndarray) -> tuple[BinaryPattern, float]:
    """Optimal binary approximation of a single c x k x k filter.

    Returns the pattern (scalar ``alpha``) and the squared error
    ``||W - alpha B||_F^2``.
    """
    w = np.asarray(w)
    if w.size == 0:
        raise ValueError("cannot binarize an empty filter")
    pattern, err = _binarize(w, 0)
    return pattern, float(err)


def binarize_weight(w: np.ndarray, granularity: str = "filter") -> tuple[BinaryPattern, np.ndarray]:
    """Binarize an OIHW weight; returns the pattern and per-filter errors.

    ``granularity="filter"`` shares one scale across each c x k x k output
    filter; ``"kernel"`` gives every k x k slice its own scale. The error
    array is always per output filter.
    """
    lead = {"filter": 1, "kernel": 2}[granularity]
    pattern, err = _binarize(w, lead)
    if lead == 2:
        err = err.sum(axis=1)
    return pattern, err


def alpha_gradient(grad_weight: np.ndarray, pattern: BinaryPattern) -> np.ndarray:
    """Chain rule through ``W = alpha * B`` with ``B`` held fixed."""
    if grad_weight.shape != pattern.signs.shape:
        raise ShapeError(f"grad shape {grad_weight.shape} != pattern shape {pattern.signs.shape}")
    axes = tuple(range(pattern.alpha.ndim, grad_weight.ndim))
    prod = grad_weight * pattern.binary(grad_weight.dtype)
    return prod.sum(axis=axes) if axes else prod


_SCOPE_RE = re.compile(r"^\s*k\s*(==|>=|<=|!=|>|<)\s*(\d+)\s*$")
_OPS = {"==": operator.eq, ">=": operator.ge, "<=": operator.le,
        "!=": operator.ne, ">": operator.gt, "<": operator.lt}


def parse_scope(expr) -> Callable[[int], bool]:
    """Turn ``"k>1"``, ``"k==3"``, ``"k>=3"``... into a kernel-size predicate.

    Several clauses may be joined with ``|`` (``"k==1|k==5"``). Callables are
    passed through unchanged.
    """
    if callable(expr):
        return expr
    clauses = []
    for part in str(expr).split("|"):
        m = _SCOPE_RE.match(part)
        if not m:
            raise ValueError(f"bad scope expression {expr!r}; expected e.g. 'k>1' or 'k==3'")
        clauses.append((_OPS[m.group(1)], int(m.group(2))))
    return lambda k: any(op(k, v) for op, v in clauses)


@dataclass
class LayerError:
    layer: str
    k: int
    filters: int
    mean_error: float


@dataclass
class BinarizationReport:
    records: list[LayerError] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def aggregate(self) -> dict[int, float]:
        """Mean per-filter error for each kernel size, weighted by filter count."""
        tot: dict[int, list[float]] = {}
        for r in self.records:
            acc = tot.setdefault(r.k, [0.0, 0])
            acc[0] += r.mean_error * r.filters
            acc[1] += r.filters
        return {k: s / n for k, (s, n) in sorted(tot.items())}

    def to_table(self, sep: str = "\t") -> str:
        """One header row of kernel sizes and one row of averaged errors."""
        agg = self.aggregate()
        head = sep.join(f"{k}x{k}" for k in agg)
        row = sep.join(f"{v:.6g}" for v in agg.values())
        return f"{head}\n{row}\n"

    def to_tsv(self) -> str:
        lines = ["layer\tk\tfilters\tmean_error"]
        lines += [f"{r.layer}\t{r.k}\t{r.filters}\t{r.mean_error:.6g}" for r in self.records]
        return "\n".join(lines) + "\n"


def _conv_in_scope(node, pred, roles) -> bool:
    return pred(node.spec["k"]) and (roles is None or node.spec.get("role", "block") in roles)


def quantization_error_report(net: Network, granularity: str = "filter") -> BinarizationReport:
    """Per-layer mean binarization error of every conv, without modifying ``net``."""
    report = BinarizationReport()
    for node in net.conv_nodes():
        w = net.weight_slot(node.id).value.astype(np.float64)
        _, err = binarize_weight(w, granularity)
        report.records.append(LayerError(node.id, node.spec["k"], w.shape[0], float(err.mean())))
    return report


def binarize_network(net: Network, scope="k>1", roles=BLOCK_ROLES,
                     granularity: str = "filter") -> tuple[Network, BinarizationReport]:
    """Return a binarized copy of ``net`` and the report for the changed layers.

    Conv weights whose kernel size satisfies ``scope`` and whose role is in
    ``roles`` (``None`` means any role) become BIN1 slots with frozen sign
    patterns. All other slots are untouched.
    """
    pred = parse_scope(scope)
    out = net.copy()
    report = BinarizationReport()
    for node in out.conv_nodes():
        slot = out.weight_slot(node.id)
        if slot.encoding != "F32" or not _conv_in_scope(node, pred, roles):
            continue
        pattern, err = binarize_weight(slot.value, granularity)
        slot.pattern = pattern
        slot.encoding = "BIN1"
        slot.frozen_pattern = True
        slot.value = pattern.reconstruct().astype(slot.value.dtype)
        report.records.append(LayerError(node.id, node.spec["k"], slot.value.shape[0], float(err.mean())))
    out.state = "BiPattern"
    return out, report


@dataclass
class Quant8Block:
    """Symmetric int8 codes; ``value = code * scale``."""

    codes: np.ndarray  # int8
    scale: np.ndarray  # float32, shape () or (out_channels,)

    @property
    def per_channel(self) -> bool:
        return self.scale.ndim == 1

    def dequantize(self) -> np.ndarray:
        s = self.scale.reshape(self.scale.shape + (1,) * (self.codes.ndim - self.scale.ndim))
        return (self.codes.astype(np.float64) * s).astype(np.float32)


def quantize_tensor(w: np.ndarray, per_channel: bool = False) -> Quant8Block:
    """scale = max|w| / 127, codes rounded half away from zero.

    An all-zero tensor (or channel) gets scale 1 and zero codes.
    """
    w64 = np.asarray(w, dtype=np.float64)
    if per_channel and w64.ndim > 1:
        amax = np.abs(w64).reshape(w64.shape[0], -1).max(axis=1)
    else:
        amax = np.asarray(np.abs(w64).max() if w64.size else 0.0)
    scale = np.where(amax > 0, amax / 127.0, 1.0).astype(np.float32)
    s = scale.astype(np.float64).reshape(scale.shape + (1,) * (w64.ndim - scale.ndim))
    q = w64 / s
    codes = np.clip(np.sign(q) * np.floor(np.abs(q) + 0.5), -127, 127).astype(np.int8)
    return Quant8Block(codes, scale)


def quantize8(net: Network, per_channel: bool = False) -> Network:
    """Quantize every remaining F32 parameter slot to 8 bits (BIN1 slots untouched)."""
    out = net.copy()
    for slot in out.params.values():
        if slot.encoding != "F32":
            continue
        q = quantize_tensor(slot.value, per_channel and slot.value.ndim > 1)
        slot.quant = q
        slot.encoding = "Q8"
        slot.value = q.dequantize().astype(slot.value.dtype)
    out.state = "BQ"
    return out
