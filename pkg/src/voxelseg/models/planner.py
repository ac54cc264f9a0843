"""Kernel-extent planning for valid-padding U-Nets.

With valid convolutions, a fixed input patch and a fixed output tile, only
some per-layer kernel extents are shape-consistent. The planner chooses an
extent of 3 or 1 for every convolution along one axis so that

* each encoder level ends on an odd length (window-3 stride-2 pooling then
  tiles it exactly and the x2 upsampling lands back on the same grid),
* every pooled length stays >= 3 where it is pooled again, and
* the decoder output hits the requested tile length,

preferring as many 3-extents as possible and, among equals, earlier ones.
"""

from __future__ import annotations

import itertools
from functools import lru_cache


class ShapePlanError(ValueError):
    pass


def trace_inplane(length: int, extents, levels: int):
    """Lengths after every conv, or ``None`` if the extents are inconsistent."""
    out = []
    L = length
    e = iter(extents)
    skips = []
    for _ in range(levels):
        for _ in range(2):
            L -= next(e) - 1
            if L < 1:
                return None
            out.append(L)
        if L < 3 or L % 2 == 0:
            return None
        skips.append(L)
        L = (L - 1) // 2
    for lvl in reversed(range(levels)):
        L = 2 * L + 1
        margin = skips[lvl] - L
        if margin < 0 or margin % 2:
            return None
        for _ in range(2):
            L -= next(e) - 1
            if L < 1:
                return None
            out.append(L)
    return out


@lru_cache(maxsize=None)
def plan_inplane(length: int, target: int, levels: int) -> tuple:
    n = 4 * levels
    best = None
    for combo in itertools.product((3, 1), repeat=n):
        trace = trace_inplane(length, combo, levels)
        if trace is None or trace[-1] != target:
            continue
        key = (sum(c == 3 for c in combo), combo)
        if best is None or key > best:
            best = key
    if best is None:
        raise ShapePlanError(f"no {levels}-level plan maps in-plane length {length} to {target}")
    return best[1]


def plan_depth(depth: int, target: int, inplane: tuple) -> tuple:
    """Give through-plane extent 3 to ``(depth - target) / 2`` convolutions.

    Convolutions that are 3 in-plane are filled first, in order, so they
    become full 3x3x3 kernels; any remainder goes to the earliest others.
    """
    margin = depth - target
    if margin < 0 or margin % 2:
        raise ShapePlanError(f"cannot reduce {depth} slices to {target} with 3-slice kernels")
    need = margin // 2
    if need > len(inplane):
        raise ShapePlanError(f"{need} slice-consuming layers needed, only {len(inplane)} available")
    order = [i for i, e in enumerate(inplane) if e == 3] + [i for i, e in enumerate(inplane) if e != 3]
    kd = [1] * len(inplane)
    for i in order[:need]:
        kd[i] = 3
    return tuple(kd)
