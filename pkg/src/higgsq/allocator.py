"""Per-layer bitwidth allocation as an exact multiple-choice knapsack.

Given per-layer sensitivities ``alpha_l`` and a menu of quantizer options
with measured relative errors ``t2[l, j]`` and exact storage costs
``cost[l, j]`` (bits), pick one option per layer to minimize
``sum_l alpha_l * t2[l, j_l]`` subject to ``sum_l cost[l, j_l] <= b_max * d``.

Objective values are compared exactly: every ``alpha_l * t2[l, j]`` float is
converted to an integer multiple of a common power-of-two unit, so the DP and
the brute-force oracle agree bit for bit, ties included.  Ties go to fewer
total bits, then to the lexicographically smallest choice vector.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import HiggsError, InfeasibleBudget, InvalidArgument
from .grids import Grid
from .quantizer import QuantConfig, decode, encode, measure_relative_error

BRUTE_FORCE_LIMIT = 10 ** 7
DP_CELL_LIMIT = 50_000_000


def effective_bitwidth(p: int, n: int, g: int, scale_bits: int = 16) -> float:
    """Average bits per parameter: ``log2(n) / p + scale_bits / g``."""
    if p < 1 or n < 1 or g < 1:
        raise InvalidArgument("p, n and g must be positive")
    return math.log2(n) / p + scale_bits / g


@dataclass
class QuantOption:
    label: str
    grid: Grid | None
    config: QuantConfig

    @property
    def bits(self) -> float:
        c = self.config
        if c.lossless:
            return 64.0 + c.scale_bits / c.g
        return effective_bitwidth(c.p, c.n, c.g, c.scale_bits)


@dataclass
class QuantMenu:
    labels: list[str]
    bits: np.ndarray  # (J,) effective bits per option
    dims: list[int]  # d^l
    t2: np.ndarray  # (L, J), NaN where unavailable
    cost: np.ndarray  # (L, J) int64 exact bits, -1 where unavailable
    layer_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.float64)
        self.t2 = np.asarray(self.t2, dtype=np.float64)
        self.cost = np.asarray(self.cost, dtype=np.int64)
        if not self.layer_names:
            self.layer_names = [f"layer{l}" for l in range(len(self.dims))]
        L, J = len(self.dims), len(self.labels)
        if self.t2.shape != (L, J) or self.cost.shape != (L, J):
            raise InvalidArgument("menu tables must have shape (layers, options)")
        ok = self.available
        if np.any(self.t2[ok] < 0) or np.any(self.bits <= 0):
            raise InvalidArgument("t2 must be >= 0 and bits > 0")

    @property
    def available(self) -> np.ndarray:
        return (self.cost >= 0) & np.isfinite(self.t2)

    @property
    def total_params(self) -> int:
        return int(sum(self.dims))

    # interchange ---------------------------------------------------------

    def write(self, csv_path, json_path) -> None:
        with open(json_path, "w") as fh:
            json.dump({"options": self.labels, "bits": self.bits.tolist(), "dims": list(map(int, self.dims)),
                       "layers": self.layer_names}, fh, indent=2)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "option", "bits", "cost_bits", "t2"])
            for l in range(len(self.dims)):
                for j, lab in enumerate(self.labels):
                    avail = self.available[l, j]
                    w.writerow([l, lab, repr(float(self.bits[j])),
                                int(self.cost[l, j]) if avail else "",
                                repr(float(self.t2[l, j])) if avail else ""])

    @classmethod
    def read(cls, csv_path, json_path) -> "QuantMenu":
        with open(json_path) as fh:
            head = json.load(fh)
        labels = list(head["options"])
        L, J = len(head["dims"]), len(labels)
        t2 = np.full((L, J), np.nan)
        cost = np.full((L, J), -1, dtype=np.int64)
        col = {lab: j for j, lab in enumerate(labels)}
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                l, j = int(row["layer"]), col[row["option"]]
                if row["cost_bits"] != "":
                    cost[l, j] = int(row["cost_bits"])
                    t2[l, j] = float(row["t2"])
        return cls(labels, np.asarray(head["bits"]), list(head["dims"]), t2, cost, head.get("layers", []))


def build_menu(model, options: Sequence[QuantOption]) -> QuantMenu:
    """Measure ``t2`` for every (layer, option) cell by real encode/decode.

    Cells whose encode fails (e.g. the layer size is not a multiple of the
    option's group size) are marked unavailable instead of aborting.
    """
    layers = model.layers
    L, J = len(layers), len(options)
    t2 = np.full((L, J), np.nan)
    cost = np.full((L, J), -1, dtype=np.int64)
    for l, w in enumerate(layers):
        for j, opt in enumerate(options):
            try:
                q = encode(w, opt.grid, opt.config)
                t2[l, j] = measure_relative_error(w, q, opt.grid)
                cost[l, j] = q.payload_bits
            except HiggsError:
                continue
    return QuantMenu([o.label for o in options], np.array([o.bits for o in options]),
                     [int(np.asarray(w).size) for w in layers], t2, cost)


# ---------------------------------------------------------------------------
# solver


@dataclass
class Allocation:
    choice: tuple[int, ...]
    total_bits: int
    avg_bits_per_param: float
    predicted_delta: float
    budget_bits: int
    labels: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "choice": list(self.choice),
            "labels": self.labels,
            "total_bits": self.total_bits,
            "budget_bits": self.budget_bits,
            "avg_bits_per_param": self.avg_bits_per_param,
            "predicted_delta": self.predicted_delta,
        }


def _alpha_array(alphas) -> np.ndarray:
    return np.asarray(getattr(alphas, "alphas", alphas), dtype=np.float64)


def _weighted(menu: QuantMenu, alphas) -> np.ndarray:
    a = _alpha_array(alphas)
    if a.shape != (len(menu.dims),):
        raise InvalidArgument(f"{a.size} alphas for {len(menu.dims)} layers")
    with np.errstate(invalid="ignore"):
        return a[:, None] * menu.t2


def _exact_ints(values: np.ndarray, mask: np.ndarray) -> list[list[int | None]]:
    """Scale the available float values to exact integers on a shared grid."""
    fr = [[Fraction(float(v)) if m else None for v, m in zip(row, mrow)]
          for row, mrow in zip(values, mask)]
    den = 1
    for row in fr:
        for f in row:
            if f is not None:
                den = max(den, f.denominator)
    return [[None if f is None else int(f * den) for f in row] for row in fr]


def _budget(menu: QuantMenu, b_max: float) -> int:
    return int(math.floor(b_max * menu.total_params))


def _min_avg_bits(menu: QuantMenu) -> float:
    mins = []
    for l in range(len(menu.dims)):
        c = menu.cost[l][menu.available[l]]
        if c.size == 0:
            return math.inf
        mins.append(int(c.min()))
    return sum(mins) / menu.total_params


def _result(menu: QuantMenu, weighted: np.ndarray, choice, budget: int) -> Allocation:
    total = int(sum(int(menu.cost[l, j]) for l, j in enumerate(choice)))
    delta = math.fsum(float(weighted[l, j]) for l, j in enumerate(choice))
    return Allocation(tuple(int(j) for j in choice), total, total / menu.total_params, delta,
                      budget, [menu.labels[j] for j in choice])


def _check_layers(menu: QuantMenu) -> None:
    for l in range(len(menu.dims)):
        if not menu.available[l].any():
            raise InvalidArgument(f"layer {l} has no available options")


def _infeasible(menu: QuantMenu, b_max: float) -> InfeasibleBudget:
    m = _min_avg_bits(menu)
    return InfeasibleBudget(
        f"budget {b_max} bits/param is infeasible; minimum achievable is {m:.6f}", m
    )


def solve_mckp(menu: QuantMenu, alphas, b_max: float) -> Allocation:
    """Exact optimal allocation by dynamic programming over the bit budget.

    Costs and budget are divided by the GCD of all available costs.  The DP
    table ``best[l][c]`` holds the minimum exact objective of layers ``l..L-1``
    using exactly ``c`` budget units; the forward pass then picks the
    smallest option index consistent with the optimum, which yields the
    lexicographically smallest optimal choice vector.
    """
    _check_layers(menu)
    weighted = _weighted(menu, alphas)
    mask = menu.available
    vals = _exact_ints(weighted, mask)
    budget = _budget(menu, b_max)
    L, J = mask.shape
    costs = [int(c) for c in menu.cost[mask]]
    unit = math.gcd(*costs) or 1
    cap = budget // unit
    if sum(int(menu.cost[l][mask[l]].min()) for l in range(L)) > budget:
        raise _infeasible(menu, b_max)
    # no allocation can use more than the all-max cost
    cap = min(cap, sum(int(menu.cost[l][mask[l]].max()) for l in range(L)) // unit)
    if (L + 1) * (cap + 1) > DP_CELL_LIMIT:
        raise InvalidArgument(f"DP table of {(L + 1) * (cap + 1)} cells exceeds the memory cap")
    units = [[int(menu.cost[l, j]) // unit if mask[l, j] else -1 for j in range(J)] for l in range(L)]

    inf = None
    best: list[list[int | None]] = [[inf] * (cap + 1) for _ in range(L + 1)]
    best[L][0] = 0
    for l in range(L - 1, -1, -1):
        nxt, cur = best[l + 1], best[l]
        for j in range(J):
            u = units[l][j]
            if u < 0 or u > cap:
                continue
            v = vals[l][j]
            for c in range(u, cap + 1):
                rest = nxt[c - u]
                if rest is None:
                    continue
                cand = rest + v
                if cur[c] is None or cand < cur[c]:
                    cur[c] = cand
    target_c, target_v = None, None
    for c in range(cap + 1):
        v = best[0][c]
        if v is not None and (target_v is None or v < target_v):
            target_c, target_v = c, v
    if target_c is None:
        raise _infeasible(menu, b_max)

    choice = []
    c, v = target_c, target_v
    for l in range(L):
        for j in range(J):
            u = units[l][j]
            if u < 0 or u > c:
                continue
            rest = best[l + 1][c - u]
            if rest is not None and rest + vals[l][j] == v:
                choice.append(j)
                c -= u
                v -= vals[l][j]
                break
    return _result(menu, weighted, choice, budget)


def brute_force_alloc(menu: QuantMenu, alphas, b_max: float) -> Allocation:
    """Exhaustive search with the same exact objective and tie rules."""
    _check_layers(menu)
    mask = menu.available
    options = [np.flatnonzero(mask[l]).tolist() for l in range(len(menu.dims))]
    if math.prod(len(o) for o in options) > BRUTE_FORCE_LIMIT:
        raise InvalidArgument("instance too large for brute force")
    weighted = _weighted(menu, alphas)
    vals = _exact_ints(weighted, mask)
    budget = _budget(menu, b_max)
    best_key = None
    for choice in itertools.product(*options):
        bits = sum(int(menu.cost[l, j]) for l, j in enumerate(choice))
        if bits > budget:
            continue
        key = (sum(vals[l][j] for l, j in enumerate(choice)), bits, choice)
        if best_key is None or key < best_key:
            best_key = key
    if best_key is None:
        raise _infeasible(menu, b_max)
    return _result(menu, weighted, best_key[2], budget)


def prune_dominated(menu: QuantMenu, alphas) -> QuantMenu:
    """Mark options that cost more *and* err more than another as unavailable."""
    weighted = _weighted(menu, alphas)
    mask = menu.available.copy()
    L, J = mask.shape
    for l in range(L):
        for j in range(J):
            if not menu.available[l, j]:
                continue
            for k in range(J):
                if (k != j and menu.available[l, k] and menu.cost[l, k] < menu.cost[l, j]
                        and weighted[l, k] < weighted[l, j]):
                    mask[l, j] = False
                    break
    t2 = np.where(mask, menu.t2, np.nan)
    cost = np.where(mask, menu.cost, -1)
    return QuantMenu(menu.labels, menu.bits, menu.dims, t2, cost, menu.layer_names)


@dataclass
class CurvePoint:
    b_max: float
    allocation: Allocation | None
    error: str | None = None

    @property
    def predicted_delta(self) -> float | None:
        return None if self.allocation is None else self.allocation.predicted_delta


def predicted_curve(menu: QuantMenu, alphas, budgets) -> list[CurvePoint]:
    """Solve for each budget (ascending); infeasible budgets are recorded."""
    budgets = [float(b) for b in budgets]
    if budgets != sorted(budgets):
        raise InvalidArgument("budgets must be sorted ascending")
    out = []
    for b in budgets:
        try:
            out.append(CurvePoint(b, solve_mckp(menu, alphas, b)))
        except InfeasibleBudget as exc:
            out.append(CurvePoint(b, None, str(exc)))
    return out


def apply_allocation(model, options: Sequence[QuantOption], allocation: Allocation):
    """Quantize the model's layers with the chosen options.

    Returns the dequantized blocks, per-layer t^2 and the quantized tensors.
    """
    blocks, t2, qs = [], [], []
    for w, j in zip(model.layers, allocation.choice):
        opt = options[j]
        q = encode(w, opt.grid, opt.config)
        qs.append(q)
        blocks.append(decode(q, opt.grid))
        t2.append(measure_relative_error(w, q, opt.grid))
    return blocks, t2, qs


def flute_ch8_options(g: int = 64, seed: int = 0, scale_bits: int = 16,
                      grids: dict | None = None) -> list[QuantOption]:
    """Kernel-friendly preset: p in {1, 2} at 2-4 bits plus an 8-bit uniform grid.

    ``grids`` may supply prebuilt grids keyed by ``(p, n)``; missing 2-D grids
    are built with CLVQ, which takes tens of seconds for n = 256.
    """
    from .grids import build_uniform_constrained, clvq_build, lloyd_max_1d

    grids = dict(grids or {})
    opts = []
    for p, n in [(1, 4), (1, 8), (1, 16), (2, 16), (2, 64), (2, 256)]:
        grid = grids.get((p, n))
        if grid is None:
            grid = lloyd_max_1d(n) if p == 1 else clvq_build(p, n, seed)
        label = f"p{p}n{n}"
        opts.append(QuantOption(label, grid, QuantConfig.for_grid(grid, g, seed, scale_bits)))
    ch8 = grids.get("ch8") or build_uniform_constrained(256)
    opts.append(QuantOption("ch8", ch8, QuantConfig.for_grid(ch8, g, seed, scale_bits)))
    return opts
