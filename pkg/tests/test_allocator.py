import json
import math

import numpy as np
import pytest

from higgsq.allocator import (
    QuantMenu,
    QuantOption,
    brute_force_alloc,
    build_menu,
    effective_bitwidth,
    predicted_curve,
    prune_dominated,
    solve_mckp,
)
from higgsq.errors import InfeasibleBudget, InvalidArgument
from higgsq.grids import zero_grid
from higgsq.harness import QuadraticModel
from higgsq.quantizer import QuantConfig, encode


def random_menu(rng, L, J, integer_t2=False):
    dims = rng.integers(1, 6, L) * 64
    bits = np.sort(rng.uniform(1, 8, J))
    cost = np.empty((L, J), dtype=np.int64)
    t2 = np.empty((L, J))
    for l in range(L):
        cost[l] = np.round(bits * dims[l]).astype(np.int64) + rng.integers(0, 3, J)
        # coarse values make exact ties common, exercising the tie rules
        t2[l] = rng.integers(0, 5, J) / 4 if integer_t2 else np.sort(rng.uniform(0, 1, J))[::-1]
    avail = rng.uniform(size=(L, J)) > 0.15
    avail[np.arange(L), rng.integers(0, J, L)] = True
    t2[~avail] = np.nan
    cost[~avail] = -1
    return QuantMenu([f"o{j}" for j in range(J)], bits, dims.tolist(), t2, cost)


def test_effective_bitwidth_paper_configs():
    assert round(effective_bitwidth(2, 256, 1024, 16), 2) == 4.02
    assert effective_bitwidth(2, 256, 1024, 16) == pytest.approx(4.015625)
    assert round(effective_bitwidth(1, 19, 1024, 16), 2) == 4.26
    assert round(effective_bitwidth(2, 88, 1024, 16), 2) == 3.25


def test_single_layer_picks_best_affordable():
    menu = QuantMenu(["a", "b", "c"], [2, 4, 8], [64], [[0.3, 0.1, 0.01]], [[128, 256, 512]])
    assert solve_mckp(menu, [1.0], 4.0).choice == (1,)
    assert solve_mckp(menu, [1.0], 100.0).choice == (2,)
    with pytest.raises(InfeasibleBudget) as exc:
        solve_mckp(menu, [1.0], 1.0)
    assert exc.value.min_avg_bits == pytest.approx(2.0)
    assert "2.0" in str(exc.value)


def test_cheap_layer_forced():
    # budget only allows one layer to use the expensive option; layer 1 matters more
    menu = QuantMenu(["lo", "hi"], [1, 4], [10, 10], [[0.5, 0.1], [0.5, 0.1]], [[10, 40], [10, 40]])
    alloc = brute_force_alloc(menu, [1.0, 5.0], 2.5)
    assert alloc.choice == (0, 1)
    assert solve_mckp(menu, [1.0, 5.0], 2.5).choice == (0, 1)


def test_tie_rules():
    # equal objective: fewer bits wins, then the lexicographically smallest choice
    menu = QuantMenu(["a", "b"], [2, 4], [10, 10], [[0.0, 0.0], [0.0, 0.0]], [[20, 40], [20, 40]])
    assert solve_mckp(menu, [1.0, 1.0], 10.0).choice == (0, 0)
    menu2 = QuantMenu(["a", "b"], [2, 2], [10, 10], [[0.0, 0.0], [0.0, 0.0]], [[20, 20], [20, 20]])
    assert solve_mckp(menu2, [1.0, 1.0], 10.0).choice == (0, 0)


def feasible_range(menu):
    lo = sum(int(c[c >= 0].min()) for c in menu.cost) / menu.total_params
    hi = sum(int(c[c >= 0].max()) for c in menu.cost) / menu.total_params
    return lo, hi


def test_dp_equals_brute_force_random():
    rng = np.random.default_rng(2024)
    checked = infeasible = 0
    trial = 0
    while checked < 200:
        L, J = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        menu = random_menu(rng, L, J, integer_t2=trial % 2 == 0)
        alphas = rng.uniform(0, 3, L) if trial % 3 else rng.integers(0, 3, L).astype(float)
        lo, hi = feasible_range(menu)
        b = rng.uniform(0.9 * lo, 1.05 * hi)
        trial += 1
        try:
            ref = brute_force_alloc(menu, alphas, b)
        except InfeasibleBudget:
            with pytest.raises(InfeasibleBudget):
                solve_mckp(menu, alphas, b)
            infeasible += 1
            continue
        got = solve_mckp(menu, alphas, b)
        assert got.choice == ref.choice
        assert got.predicted_delta == ref.predicted_delta
        assert got.total_bits == ref.total_bits <= ref.budget_bits
        checked += 1
    assert infeasible > 0


def test_pruning_and_scaling_invariance():
    rng = np.random.default_rng(7)
    for _ in range(50):
        menu = random_menu(rng, int(rng.integers(1, 6)), 4)
        alphas = rng.uniform(0.1, 3, len(menu.dims))
        b = rng.uniform(3, 9)
        try:
            base = solve_mckp(menu, alphas, b)
        except InfeasibleBudget:
            continue
        pruned = solve_mckp(prune_dominated(menu, alphas), alphas, b)
        assert pruned.predicted_delta == base.predicted_delta
        assert solve_mckp(menu, alphas * 8.0, b).choice == base.choice


def test_brute_force_refusals():
    menu = QuantMenu(["a", "b"], [2, 4], [10, 10], [[0.1, np.nan], [np.nan, np.nan]], [[20, -1], [-1, -1]])
    with pytest.raises(InvalidArgument):
        brute_force_alloc(menu, [1, 1], 8)
    big = QuantMenu([f"o{j}" for j in range(10)], np.arange(1, 11), [64] * 8,
                    np.ones((8, 10)), np.tile(np.arange(1, 11) * 64, (8, 1)))
    with pytest.raises(InvalidArgument):
        brute_force_alloc(big, np.ones(8), 5)


def test_predicted_curve_monotone():
    rng = np.random.default_rng(3)
    menu = random_menu(rng, 6, 4)
    alphas = rng.uniform(0.5, 2, 6)
    budgets = np.linspace(0.5, 10, 25)
    pts = predicted_curve(menu, alphas, budgets)
    assert pts[0].allocation is None and pts[0].error
    deltas = [p.predicted_delta for p in pts if p.allocation is not None]
    assert all(a >= b for a, b in zip(deltas, deltas[1:]))
    best = math.fsum(min(alphas[l] * menu.t2[l][menu.available[l]]) for l in range(6))
    assert deltas[-1] == pytest.approx(best, rel=1e-12)
    with pytest.raises(InvalidArgument):
        predicted_curve(menu, alphas, [3.0, 2.0])


def test_build_menu_columns():
    from higgsq.grids import lloyd_max_1d

    # large layers keep the sampling noise of t^2 well inside the 5% band;
    # 17 * 1024 and 33 * 1024 are not multiples of 4096
    quad_model = QuadraticModel.random([1.0, 2.0], [17 * 1024, 33 * 1024], seed=1)
    lm = lloyd_max_1d(16)
    z = zero_grid(1)
    opts = [
        QuantOption("lossless", None, QuantConfig(64, 1, 1, lossless=True)),
        QuantOption("zero", z, QuantConfig.for_grid(z, 64)),
        QuantOption("lm16", lm, QuantConfig.for_grid(lm, 64)),
        QuantOption("lm16g4096", lm, QuantConfig.for_grid(lm, 4096)),
    ]
    menu = build_menu(quad_model, opts)
    assert np.all(menu.t2[:, 0] < 1e-18)
    np.testing.assert_array_equal(menu.t2[:, 1], 1.0)
    assert np.all(np.abs(menu.t2[:, 2] / lm.mse_per_dim - 1) < 0.05)
    # layers smaller than 4096 cannot use that group size
    assert not menu.available[:, 3].any()
    for l, w in enumerate(quad_model.layers):
        assert menu.cost[l, 2] == encode(w, lm, opts[2].config).payload_bits


def test_allocation_total_bits_matches_payload(quad_model):
    from higgsq.grids import lloyd_max_1d

    grids = [lloyd_max_1d(n) for n in (4, 16, 19)]
    opts = [QuantOption(f"lm{g.n}", g, QuantConfig.for_grid(g, 256)) for g in grids]
    menu = build_menu(quad_model, opts)
    alloc = solve_mckp(menu, quad_model.analytic_alphas(), 3.0)
    payload = sum(encode(w, opts[j].grid, opts[j].config).payload_bits
                  for w, j in zip(quad_model.layers, alloc.choice))
    assert alloc.total_bits == payload


def test_menu_interchange(tmp_path):
    rng = np.random.default_rng(1)
    menu = random_menu(rng, 4, 3)
    menu.write(tmp_path / "m.csv", tmp_path / "m.json")
    back = QuantMenu.read(tmp_path / "m.csv", tmp_path / "m.json")
    np.testing.assert_array_equal(back.cost, menu.cost)
    np.testing.assert_array_equal(np.isnan(back.t2), np.isnan(menu.t2))
    np.testing.assert_array_equal(back.t2[menu.available], menu.t2[menu.available])
    head = json.loads((tmp_path / "m.json").read_text())
    assert head["options"] == menu.labels and head["dims"] == menu.dims
