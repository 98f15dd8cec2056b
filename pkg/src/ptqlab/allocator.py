"""Split-ratio precision assignment and budget-targeted ratio search.

Modules arrive ranked by descending sensitivity. ``assign_precision`` cuts
the ranking at k16 = floor(p16 * M) and k8 = floor((p16 + p8) * M)
(1-indexed, boundary included), assigning 16/8/4 bits to the three
segments. ``ratios_for_budget`` finds ratios matching a target average
bitwidth by waterfilling: starting from all-4-bit it raises modules level
by level (4 -> 8 -> 16) in ranking order while the size-weighted average
stays within budget, stopping a pass at the first module that no longer
fits so the assignment stays a monotone prefix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ParameterError
from .quant import DEFAULT_GROUP_SIZE, PROVENANCE_HAWQ, GroupQuantSpec, QuantPlan

BIT_LEVELS = (16, 8, 4)


@dataclass(frozen=True)
class SplitRatios:
    p16: float
    p8: float
    p4: float

    def __post_init__(self):
        for name, value in (("p16", self.p16), ("p8", self.p8), ("p4", self.p4)):
            if value < 0:
                raise ParameterError(f"{name} must be >= 0, got {value}")
        if abs(self.p16 + self.p8 + self.p4 - 1.0) > 1e-9:
            raise ParameterError(f"split ratios must sum to 1, got {self.p16 + self.p8 + self.p4}")

    def as_tuple(self) -> tuple:
        return (self.p16, self.p8, self.p4)


def cutoff_bits(n_modules: int, ratios: SplitRatios, levels=BIT_LEVELS) -> list:
    """Bit level per rank position (1-indexed cutoffs with floor arithmetic)."""
    k_hi = math.floor(ratios.p16 * n_modules)
    k_mid = math.floor((ratios.p16 + ratios.p8) * n_modules)
    bits = []
    for m in range(1, n_modules + 1):
        if m <= k_hi:
            bits.append(levels[0])
        elif m <= k_mid:
            bits.append(levels[1])
        else:
            bits.append(levels[2])
    return bits


def assign_precision(ranked_modules, ratios: SplitRatios,
                     group_size: int = DEFAULT_GROUP_SIZE,
                     levels=BIT_LEVELS) -> QuantPlan:
    """QuantPlan over the ranked module paths; most sensitive get most bits.

    ``levels`` swaps the bit tiers; (8, 4, 4) reproduces the 8/4 split where
    the p16 fraction gets 8 bits and the rest 4.
    """
    paths = [r.path if hasattr(r, "path") else str(r) for r in ranked_modules]
    if not paths:
        raise ParameterError("no ranked modules to assign")
    bits = cutoff_bits(len(paths), ratios, levels)
    specs = {p: GroupQuantSpec(b, group_size) for p, b in zip(paths, bits)}
    return QuantPlan(specs, PROVENANCE_HAWQ, ratios=ratios.as_tuple())


def ratios_for_budget(ranked_modules_with_sizes, target_avg_bits: float):
    """(SplitRatios, achieved_avg_bits) for a target size-weighted bitwidth.

    ``ranked_modules_with_sizes``: iterable of (path, n_params) in
    descending sensitivity order.
    """
    if not (4.0 <= target_avg_bits <= 16.0):
        raise ParameterError(f"target_avg_bits must be within [4, 16], got {target_avg_bits}")
    items = [(str(p), int(n)) for p, n in ranked_modules_with_sizes]
    if not items:
        raise ParameterError("no modules given")
    total_n = sum(n for _, n in items)
    budget = target_avg_bits * total_n

    bits = [4] * len(items)
    used = 4.0 * total_n
    for level_from, level_to in ((4, 8), (8, 16)):
        for i, (_, n) in enumerate(items):
            if bits[i] != level_from:
                break
            candidate = used + (level_to - level_from) * n
            if candidate > budget + 1e-9:
                break  # keep the assignment a monotone prefix
            bits[i] = level_to
            used = candidate

    counts = {16: 0, 8: 0, 4: 0}
    for b in bits:
        counts[b] += 1
    m = len(items)
    ratios = SplitRatios(counts[16] / m, counts[8] / m, counts[4] / m)
    achieved = used / total_n
    return ratios, achieved
