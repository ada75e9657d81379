import math

import numpy as np
import pytest

from higgsq.allocator import QuantOption, build_menu, solve_mckp
from higgsq.errors import InvalidArgument
from higgsq.grids import lloyd_max_1d, zero_grid
from higgsq.harness import QuadraticModel
from higgsq.linearity import (
    AlphaVector,
    batch_additivity_check,
    calibrate_alphas,
    fit_through_origin,
    gaussian_noise_insert,
    kl_objective,
    layer_additivity,
    measure_layer_errors,
    predict_loss,
    sample_subset,
    scaled_hessian_block,
    uniform_t_levels,
)
from higgsq.quantizer import QuantConfig


class PartlyFlat:
    """Two blocks; the loss ignores the second one (zero curvature)."""

    def __init__(self):
        rng = np.random.default_rng(0)
        self.layers = [rng.standard_normal(128), rng.standard_normal(128)]
        self.inner = QuadraticModel([1.0], [self.layers[0]])

    def loss(self, ws):
        return self.inner.loss([ws[0]])


# -- noise insertion -----------------------------------------------------


def test_noise_insert_basics():
    w = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(gaussian_noise_insert(w, 0.0, 1), w)
    with pytest.raises(InvalidArgument):
        gaussian_noise_insert(w, -0.1, 1)
    ones = np.ones((2, 2))
    draws = np.stack([gaussian_noise_insert(ones, 0.5, s) - ones for s in range(4000)])
    assert draws.std() == pytest.approx(0.5, rel=0.03)


def test_noise_insert_relative_error():
    w = np.random.default_rng(3).standard_normal((16, 16))
    rel = [np.sum((gaussian_noise_insert(w, 0.1, s) - w) ** 2) / np.sum(w * w) for s in range(1000)]
    assert np.mean(rel) == pytest.approx(0.01, rel=0.05)


# -- fitting -------------------------------------------------------------


def test_fit_exact_and_degenerate():
    t = np.linspace(0.01, 0.2, 6)
    a, r2, se = fit_through_origin(t, 3.7 * t ** 2)
    assert a == pytest.approx(3.7, rel=1e-14) and r2 == pytest.approx(1.0)
    a0, r20, _ = fit_through_origin(t, np.zeros(6))
    assert a0 == 0.0 and math.isnan(r20)


def test_calibrate_quadratic_oracle(quad_model):
    av = calibrate_alphas(quad_model, uniform_t_levels(6), reps=32, seed=1)
    np.testing.assert_allclose(av.alphas, quad_model.analytic_alphas(), rtol=0.02)
    assert av.deltas.shape == (4, 6, 32)
    assert not av.flagged


def test_zero_curvature_layer():
    av = calibrate_alphas(PartlyFlat(), uniform_t_levels(5), reps=8)
    assert av.alphas[1] == 0.0 and math.isnan(av.r2[1])
    assert 1 in av.flagged
    assert av.alphas[0] == pytest.approx(64.0, rel=0.05)


def test_calibrate_validation(quad_model):
    with pytest.raises(InvalidArgument):
        calibrate_alphas(quad_model, [0.1], reps=2)
    with pytest.raises(InvalidArgument):
        calibrate_alphas(quad_model, [0.1, 0.5], reps=2)
    with pytest.raises(InvalidArgument):
        calibrate_alphas(quad_model, [0.05, 0.1], reps=2, objective="ppl")


def test_alpha_vector_round_trip(quad_model, tmp_path):
    av = calibrate_alphas(quad_model, uniform_t_levels(3), reps=2)
    back = AlphaVector.from_summary(av.summary())
    np.testing.assert_array_equal(back.alphas, av.alphas)
    av.write_csv(tmp_path / "d.csv")
    assert len((tmp_path / "d.csv").read_text().splitlines()) == 1 + 4 * 3 * 2


# -- prediction ----------------------------------------------------------


def test_predict_loss_examples():
    assert predict_loss(1.5, [2.0, 3.0], [0.0, 0.0]) == 1.5
    assert predict_loss(1.0, [2.0], [0.01]) == pytest.approx(1.02)
    with pytest.raises(InvalidArgument):
        predict_loss(1.0, [2.0], [0.1, 0.2])


def test_predict_matches_quadratic_measurement(quad_model):
    av = calibrate_alphas(quad_model, uniform_t_levels(6), reps=32, seed=2)
    t = np.array([0.033, 0.071, 0.125, 0.18])  # fresh levels, not used in calibration
    base = quad_model.loss(quad_model.layers)
    meas = np.mean([quad_model.loss([gaussian_noise_insert(w, tl, 1000 * r + l)
                                     for l, (w, tl) in enumerate(zip(quad_model.layers, t))])
                    for r in range(200)])
    pred = predict_loss(base, av, t ** 2)
    assert abs(pred - meas) / (meas - base) < 0.02


# -- quantized layer errors ----------------------------------------------


def test_measure_layer_errors():
    model = QuadraticModel.random([1.0, 1.0], [1 << 14, 1 << 15], seed=3)
    lm = lloyd_max_1d(4)
    z = zero_grid(1)
    lossless = (None, QuantConfig(64, 1, 1, lossless=True))
    assert max(measure_layer_errors(model, [lossless, lossless])) < 1e-18
    t2 = measure_layer_errors(model, [(lm, QuantConfig.for_grid(lm, 256))] * 2)
    assert all(abs(v / lm.mse_per_dim - 1) < 0.05 for v in t2)
    assert measure_layer_errors(model, [(z, QuantConfig.for_grid(z, 64)), lossless])[0] == 1.0


# -- KL objective --------------------------------------------------------


def test_kl_basics(tiny_model):
    x = tiny_model.random_inputs(256, 0)
    ref = tiny_model.layers
    assert kl_objective(tiny_model, ref, x) == 0.0
    for s in range(5):
        noisy = [gaussian_noise_insert(w, 0.3, s * 10 + i) for i, w in enumerate(ref)]
        assert kl_objective(tiny_model, noisy, x) >= 0.0
    av = calibrate_alphas(tiny_model, uniform_t_levels(6), reps=8, objective="kl")
    assert np.all(av.alphas > 0) and np.all(av.r2 > 0.95)


def test_kl_and_loss_alphas_give_same_allocations(tiny_model):
    """Data-free (KL) and data-dependent (loss) alphas should agree on >= 8/10 budgets."""
    opts = []
    for n in (4, 8, 16, 32, 64):
        g = lloyd_max_1d(n)
        opts.append(QuantOption(f"lm{n}", g, QuantConfig.for_grid(g, 64)))
    menu = build_menu(tiny_model, opts)
    levels = uniform_t_levels(8)
    a_loss = calibrate_alphas(tiny_model, levels, reps=16, objective="loss")
    a_kl = calibrate_alphas(tiny_model, levels, reps=16, objective="kl")
    lo = sum(int(c.min()) for c in menu.cost) / menu.total_params
    hi = sum(int(c.max()) for c in menu.cost) / menu.total_params
    budgets = np.random.default_rng(0).uniform(lo, hi, 10)
    same = sum(solve_mckp(menu, a_loss, b).choice == solve_mckp(menu, a_kl, b).choice for b in budgets)
    print(f"KL vs loss allocation agreement: {same}/10")
    assert same >= 8


# -- probes --------------------------------------------------------------


def test_hessian_quadratic(quad_model):
    sub = sample_subset(quad_model, 40, seed=1)
    hp = scaled_hessian_block(quad_model, sub)
    A = quad_model.analytic_scaled_hessian(sub)
    assert np.abs(hp.matrix - A).max() / np.abs(A).max() < 1e-4
    assert hp.offdiag_mass < 1e-6
    with pytest.raises(InvalidArgument):
        scaled_hessian_block(quad_model, sub, h=0.0)


def test_hessian_tiny(tiny_model):
    hp = scaled_hessian_block(tiny_model, sample_subset(tiny_model, 20, seed=2), h=1e-4)
    assert hp.symmetry_defect < 1e-3
    assert hp.min_eig >= -1e-3 * hp.max_eig


def test_hessian_loss_only_stencil():
    class NoGrad:
        def __init__(self, q):
            self.q = q
            self.layers = q.layers

        def loss(self, ws):
            return self.q.loss(ws)

    q = QuadraticModel.random([1.0, 3.0], [8, 16], seed=0)
    sub = sample_subset(q, 4)
    hp = scaled_hessian_block(NoGrad(q), sub, h=1e-3)
    A = q.analytic_scaled_hessian(sub)
    assert np.abs(hp.matrix - A).max() / np.abs(A).max() < 1e-4


def test_batch_additivity(tiny_model):
    x, y = tiny_model.x, tiny_model.y
    assert batch_additivity_check(tiny_model, x[:1], y[:1]).defect == 0.0
    for b in (16, 64):
        rep = batch_additivity_check(tiny_model, x[:b], y[:b])
        assert rep.passed and rep.defect < 1e-9
    assert not batch_additivity_check(tiny_model, x[:64], y[:64], reduction="mean").passed


def test_layer_additivity(tiny_model, quad_model):
    assert layer_additivity(quad_model, 0.1, reps=4).rel_error < 1e-9
    assert layer_additivity(tiny_model, 0.1, reps=8).rel_error < 0.1
