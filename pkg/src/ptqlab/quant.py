"""Per-group symmetric simulated quantization.

Weight matrices are partitioned along the input dimension (axis 1) into
fixed-size groups; each (row, group) pair gets one scale. The grid is
symmetric with qmax = 2**(bits-1) - 1 and no zero point, values are rounded
half away from zero, and 16 bits means exact passthrough. Quantized models
keep float32 storage: weights are replaced by their dequantized values
("simulated" quantization), so only accuracy effects are modeled.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CoverageError, NumericError, ParameterError
from .model.checkpoint import ModelCheckpoint

SUPPORTED_BITS = (2, 3, 4, 8, 16)
QUANT_BITS = (2, 3, 4, 8)  # widths that actually round
DEFAULT_GROUP_SIZE = 128
SCALE_BITS = 16  # storage cost of one per-group scale

PROVENANCE_UNIFORM = "uniform"
PROVENANCE_HAWQ = "hawq_split"
PROVENANCE_MANUAL = "manual"


@dataclass(frozen=True)
class GroupQuantSpec:
    bits: int
    group_size: int = DEFAULT_GROUP_SIZE

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ParameterError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.group_size < 1:
            raise ParameterError(f"group_size must be >= 1, got {self.group_size}")

    @property
    def passthrough(self) -> bool:
        return self.bits == 16

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


@dataclass
class QuantizedWeight:
    shape: tuple
    spec: GroupQuantSpec
    scales: np.ndarray | None  # (d_out, n_groups) float64; None for passthrough
    codes: np.ndarray | None   # (d_out, d_in) int16; None for passthrough
    values: np.ndarray | None = None  # original array (passthrough only)


def round_half_away_from_zero(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_group(values: np.ndarray, bits: int):
    """(scale, codes) for one group vector; scale=1 convention for all zeros."""
    if bits not in QUANT_BITS:
        raise ParameterError(f"quantize_group needs bits in {QUANT_BITS}, got {bits}")
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericError("non-finite values in quantization group")
    qmax = 2 ** (bits - 1) - 1
    peak = float(np.max(np.abs(values))) if values.size else 0.0
    scale = peak / qmax if peak > 0 else 1.0
    codes = np.clip(round_half_away_from_zero(values / scale), -qmax, qmax).astype(np.int16)
    return scale, codes


def quantize_weight(weight: np.ndarray, spec: GroupQuantSpec) -> QuantizedWeight:
    """Quantize a 2-D weight group-by-group along the input dimension."""
    weight = np.asarray(weight)
    if weight.ndim != 2:
        raise ParameterError(f"expected a 2-D weight, got shape {weight.shape}")
    if spec.passthrough:
        return QuantizedWeight(weight.shape, spec, None, None, weight.copy())
    w = weight.astype(np.float64)
    if not np.all(np.isfinite(w)):
        raise NumericError("non-finite values in weight")
    d_out, d_in = w.shape
    n_groups = math.ceil(d_in / spec.group_size)
    scales = np.empty((d_out, n_groups), dtype=np.float64)
    codes = np.empty((d_out, d_in), dtype=np.int16)
    qmax = spec.qmax
    for g in range(n_groups):
        lo = g * spec.group_size
        hi = min(lo + spec.group_size, d_in)
        block = w[:, lo:hi]
        peak = np.max(np.abs(block), axis=1)
        s = np.where(peak > 0, peak / qmax, 1.0)
        codes[:, lo:hi] = np.clip(round_half_away_from_zero(block / s[:, None]),
                                  -qmax, qmax).astype(np.int16)
        scales[:, g] = s
    return QuantizedWeight(weight.shape, spec, scales, codes)


def dequantize(qw: QuantizedWeight) -> np.ndarray:
    """code * scale per element; exact passthrough when bits == 16."""
    if qw.spec.passthrough:
        return qw.values.copy()
    d_out, d_in = qw.shape
    out = np.empty((d_out, d_in), dtype=np.float64)
    gs = qw.spec.group_size
    for g in range(qw.scales.shape[1]):
        lo = g * gs
        hi = min(lo + gs, d_in)
        out[:, lo:hi] = qw.codes[:, lo:hi].astype(np.float64) * qw.scales[:, g][:, None]
    return out


@dataclass
class QuantPlan:
    """Per-module bitwidth assignment covering a checkpoint's quantizable weights."""

    specs: dict = field(default_factory=dict)  # path -> GroupQuantSpec
    provenance: str = PROVENANCE_MANUAL
    ratios: tuple | None = None  # recorded split ratios for hawq_split plans

    def paths(self) -> list:
        return sorted(self.specs)

    def label(self) -> str:
        bits = sorted({s.bits for s in self.specs.values()}, reverse=True)
        if len(bits) == 1:
            return f"{bits[0]}bit"
        return "hawq-" + "/".join(str(b) for b in bits)

    def save(self, path) -> None:
        sizes = {s.group_size for s in self.specs.values()}
        if len(sizes) > 1:
            raise ParameterError("plan file format requires a single group_size")
        doc = {
            "version": 1,
            "group_size": sizes.pop() if sizes else DEFAULT_GROUP_SIZE,
            "provenance": self.provenance,
            "modules": [{"path": p, "bits": self.specs[p].bits} for p in self.paths()],
        }
        if self.ratios is not None:
            doc["ratios"] = list(self.ratios)
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "QuantPlan":
        doc = json.loads(Path(path).read_text())
        gs = int(doc["group_size"])
        specs = {m["path"]: GroupQuantSpec(int(m["bits"]), gs) for m in doc["modules"]}
        ratios = tuple(doc["ratios"]) if "ratios" in doc else None
        return cls(specs, doc.get("provenance", PROVENANCE_MANUAL), ratios)


def uniform_plan(ckpt: ModelCheckpoint, bits: int, group_size: int = DEFAULT_GROUP_SIZE,
                 include_embeddings: bool = False) -> QuantPlan:
    spec = GroupQuantSpec(bits, group_size)
    paths = ckpt.quantizable_paths(include_embeddings=include_embeddings)
    return QuantPlan({p: spec for p in paths}, PROVENANCE_UNIFORM)


def check_coverage(ckpt: ModelCheckpoint, plan: QuantPlan) -> None:
    """Plan must cover every default-quantizable path; extras must exist."""
    allowed = set(ckpt.quantizable_paths(include_embeddings=True))
    required = set(ckpt.quantizable_paths(include_embeddings=False))
    have = set(plan.specs)
    missing = sorted(required - have)
    unknown = sorted(have - allowed)
    if missing or unknown:
        raise CoverageError(
            f"plan does not match checkpoint: missing={missing} unknown={unknown}",
            missing=missing, unknown=unknown)


def rtn_quantize_model(ckpt: ModelCheckpoint, plan: QuantPlan) -> ModelCheckpoint:
    """Round-to-nearest: replace each planned weight by dequantize(quantize(w))."""
    check_coverage(ckpt, plan)
    out = ckpt.copy()
    for path, spec in plan.specs.items():
        if spec.passthrough:
            continue
        qw = quantize_weight(out.params[path], spec)
        out.params[path] = dequantize(qw).astype(np.float32)
    out.meta = dict(out.meta)
    out.meta["quantization"] = {"method": "rtn", "plan": {p: plan.specs[p].bits for p in plan.paths()}}
    return out


def memory_footprint(plan: QuantPlan, ckpt: ModelCheckpoint):
    """(raw_avg_bits, effective_avg_bits, total_bytes_effective) over plan modules.

    Effective bits add the per-group scale overhead 16/group_size for
    quantized modules; passthrough modules carry no scale storage.
    """
    check_coverage(ckpt, plan)
    total_n = 0
    raw_sum = 0.0
    eff_sum = 0.0
    for path, spec in plan.specs.items():
        n = ckpt.n_params(path)
        eff = spec.bits if spec.passthrough else spec.bits + SCALE_BITS / spec.group_size
        total_n += n
        raw_sum += n * spec.bits
        eff_sum += n * eff
    return raw_sum / total_n, eff_sum / total_n, eff_sum / 8.0
