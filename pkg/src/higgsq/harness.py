"""Desk-scale models with known or measurable loss landscapes.

``QuadraticModel`` is an analytic oracle for which the linear error model is
exact; ``TinyModel`` is a small tanh MLP classifier trained to a certified
near-stationary point on a frozen synthetic dataset.

Both expose the same duck-typed surface used by :mod:`higgsq.linearity` and
:mod:`higgsq.allocator`:

* ``layers`` - list of reference weight blocks (the quantizable tensors)
* ``loss(weights)`` - scalar objective for a full list of blocks
* ``gradient(weights)`` - list of per-block gradients
* ``per_sample_losses`` / ``data_loss`` / ``log_probs`` / ``random_inputs``
  on models that have a dataset
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .errors import ConvergenceError, InvalidArgument
from .grids import Grid, lloyd_max_1d, zero_grid
from .linearity import (
    DEFAULT_T_RANGE,
    AlphaVector,
    calibrate_alphas,
    gaussian_noise_insert,
    quantize_layers,
    uniform_t_levels,
)
from .quantizer import QuantConfig


class QuadraticModel:
    """Block-quadratic loss with a known minimizer and block-scaled curvature.

    ``loss(W) = base + 1/2 * sum_l h_l * ||W_l - W*_l||_F^2`` with
    ``h_l = z_l * d_l / ||W*_l||_F^2``.  Gaussian noise at relative level
    ``t`` then raises the expected loss by exactly ``z_l d_l t^2 / 2``.
    """

    def __init__(self, z, wstar, base: float = 0.0):
        z = [float(v) for v in z]
        wstar = [np.array(w, dtype=np.float64) for w in wstar]
        if len(z) != len(wstar) or not z:
            raise InvalidArgument("need one curvature per block and at least one block")
        if any(v <= 0 or not math.isfinite(v) for v in z):
            raise InvalidArgument("curvatures z_l must be finite and > 0")
        norms2 = [float(np.sum(w * w)) for w in wstar]
        if any(n == 0 for n in norms2):
            raise InvalidArgument("reference blocks must have nonzero norm")
        self.z = z
        self.wstar = wstar
        self.base = float(base)
        self.dims = [w.size for w in wstar]
        self.curvature = [zl * d / n2 for zl, d, n2 in zip(z, self.dims, norms2)]

    @property
    def layers(self) -> list[np.ndarray]:
        return self.wstar

    def loss(self, weights) -> float:
        acc = 0.0
        for h, w, ws in zip(self.curvature, weights, self.wstar):
            diff = np.asarray(w) - ws
            acc += 0.5 * h * float(np.sum(diff * diff))
        return self.base + acc

    def gradient(self, weights) -> list[np.ndarray]:
        return [h * (np.asarray(w) - ws) for h, w, ws in zip(self.curvature, weights, self.wstar)]

    def analytic_alphas(self) -> np.ndarray:
        return np.array([zl * d / 2.0 for zl, d in zip(self.z, self.dims)])

    def analytic_scaled_hessian(self, subset) -> np.ndarray:
        """Block-norm scaled Hessian restricted to ``subset`` of (layer, index)."""
        diag = [self.curvature[l] * float(np.sum(self.wstar[l] ** 2)) for l, _ in subset]
        return np.diag(diag)

    @classmethod
    def random(cls, z, dims, seed: int = 0, base: float = 1.0) -> "QuadraticModel":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9AD]))
        return cls(z, [rng.standard_normal(d) for d in dims], base)


# ---------------------------------------------------------------------------
# tiny MLP


@dataclass
class TinyConfig:
    input_dim: int = 16
    hidden: tuple[int, ...] = (32, 32)
    classes: int = 8
    samples: int = 2048
    center_scale: float = 0.5
    weight_decay: float = 3.0
    gd_steps: int = 200
    max_iters: int = 20000
    grad_rtol: float = 1e-4

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 1 <= len(self.hidden) <= 3:
            raise InvalidArgument("TinyConfig supports 2 to 4 linear layers")
        if min(self.input_dim, self.classes, self.samples, *self.hidden) < 1:
            raise InvalidArgument("all TinyConfig sizes must be positive")
        if self.classes < 2:
            raise InvalidArgument("need at least two classes")


def make_dataset(cfg: TinyConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-cluster classification data, fully determined by ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDA7A]))
    centers = rng.normal(0.0, cfg.center_scale, (cfg.classes, cfg.input_dim))
    y = rng.integers(cfg.classes, size=cfg.samples)
    x = centers[y] + rng.standard_normal((cfg.samples, cfg.input_dim))
    return x, y


class TinyModel:
    """Tanh MLP with a sum-form cross-entropy objective plus weight decay.

    Only the weight matrices are treated as quantizable layers; biases stay
    at their trained values.  The objective used for the linearity model is
    ``sum_i CE_i + (weight_decay / 2) * ||params||^2`` so that the trained
    point is a genuine stationary point.
    """

    def __init__(self, cfg: TinyConfig, weights, biases, x, y, seed: int, trace=None):
        self.config = cfg
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self.x = x
        self.y = y
        self.seed = seed
        self.trace = trace or []
        self.dims = [w.size for w in self.weights]

    @property
    def layers(self) -> list[np.ndarray]:
        return self.weights

    # forward / backward ------------------------------------------------

    def _forward(self, weights, x):
        acts = [x]
        h = x
        for i, (w, b) in enumerate(zip(weights, self.biases)):
            z = h @ np.asarray(w).T + b
            h = np.tanh(z) if i < len(weights) - 1 else z
            acts.append(h)
        return acts

    def log_probs(self, weights, x) -> np.ndarray:
        logits = self._forward(weights, np.asarray(x, dtype=np.float64))[-1]
        return logits - logsumexp(logits, axis=1, keepdims=True)

    def per_sample_losses(self, weights, x=None, y=None) -> np.ndarray:
        x = self.x if x is None else x
        y = self.y if y is None else y
        lp = self.log_probs(weights, x)
        return -lp[np.arange(len(y)), y]

    def data_loss(self, weights, x=None, y=None, reduction: str = "sum") -> float:
        losses = self.per_sample_losses(weights, x, y)
        if reduction == "sum":
            return float(np.sum(losses))
        if reduction == "mean":
            return float(np.mean(losses))
        raise InvalidArgument(f"unknown reduction {reduction!r}")

    def _penalty(self, weights) -> float:
        sq = sum(float(np.sum(np.asarray(w) ** 2)) for w in weights)
        sq += sum(float(np.sum(b * b)) for b in self.biases)
        return 0.5 * self.config.weight_decay * sq

    def loss(self, weights) -> float:
        return self.data_loss(weights) + self._penalty(weights)

    def _grads(self, weights, biases):
        x, y = self.x, self.y
        acts = [x]
        h = x
        for i, (w, b) in enumerate(zip(weights, biases)):
            z = h @ w.T + b
            h = np.tanh(z) if i < len(weights) - 1 else z
            acts.append(h)
        logits = acts[-1]
        lse = logsumexp(logits, axis=1, keepdims=True)
        probs = np.exp(logits - lse)
        loss = float(np.sum(lse[:, 0] - logits[np.arange(len(y)), y]))
        delta = probs
        delta[np.arange(len(y)), y] -= 1.0
        gw, gb = [None] * len(weights), [None] * len(weights)
        for i in range(len(weights) - 1, -1, -1):
            gw[i] = delta.T @ acts[i]
            gb[i] = delta.sum(axis=0)
            if i:
                delta = (delta @ weights[i]) * (1.0 - acts[i] ** 2)
        lam = self.config.weight_decay
        sq = 0.0
        for i in range(len(weights)):
            gw[i] += lam * weights[i]
            gb[i] += lam * biases[i]
            sq += float(np.sum(weights[i] ** 2) + np.sum(biases[i] ** 2))
        return loss + 0.5 * lam * sq, gw, gb

    def gradient(self, weights) -> list[np.ndarray]:
        return self._grads([np.asarray(w) for w in weights], self.biases)[1]

    def full_gradient_norm(self) -> float:
        _, gw, gb = self._grads(self.weights, self.biases)
        return math.sqrt(sum(float(np.sum(g * g)) for g in gw + gb))

    def random_inputs(self, count: int, seed: int) -> np.ndarray:
        """Label-free probe inputs: isotropic Gaussians at the data's scale."""
        rms = float(np.sqrt(np.mean(self.x ** 2)))
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x8A4D]))
        return rms * rng.standard_normal((count, self.config.input_dim))


def _pack(ws, bs) -> np.ndarray:
    return np.concatenate([a.reshape(-1) for pair in zip(ws, bs) for a in pair])


def _unpack(theta, shapes):
    ws, bs, off = [], [], 0
    for (o, i) in shapes:
        ws.append(theta[off : off + o * i].reshape(o, i))
        off += o * i
        bs.append(theta[off : off + o])
        off += o
    return ws, bs


def train_tiny(config: TinyConfig | None = None, seed: int = 0) -> TinyModel:
    """Train the tiny MLP to a near-stationary point.

    Full-batch gradient descent with a backtracking (decreasing) step warms
    up the weights; L-BFGS then drives the gradient norm below
    ``grad_rtol * (1 + loss)``.  Raises :class:`ConvergenceError` with the
    training trace if the iteration cap is hit first.
    """
    cfg = config or TinyConfig()
    x, y = make_dataset(cfg, seed)
    sizes = [cfg.input_dim, *cfg.hidden, cfg.classes]
    shapes = [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1417]))
    ws = [rng.normal(0.0, 1.0 / math.sqrt(i), (o, i)) for o, i in shapes]
    bs = [np.zeros(o) for o, _ in shapes]
    model = TinyModel(cfg, ws, bs, x, y, seed)
    trace: list[dict] = []

    def fg(theta):
        w, b = _unpack(theta, shapes)
        f, gw, gb = model._grads(w, b)
        fg.last_grad = _pack(gw, gb)
        return f, fg.last_grad

    theta = _pack(ws, bs)
    f, g = fg(theta)
    trace.append({"phase": "init", "iter": 0, "loss": f, "grad_norm": float(np.linalg.norm(g))})
    step = 1.0 / cfg.samples
    for it in range(1, cfg.gd_steps + 1):
        gn2 = float(g @ g)
        while True:
            cand = theta - step * g
            fc, gc = fg(cand)
            if fc <= f - 0.5 * step * gn2 or step < 1e-12:
                break
            step *= 0.5
        theta, f, g = cand, fc, gc
        trace.append({"phase": "gd", "iter": it, "loss": f, "grad_norm": math.sqrt(gn2), "step": step})

    tol = cfg.grad_rtol

    def callback(intermediate_result):
        fv = float(intermediate_result.fun)
        gv = fg.last_grad
        gn = float(np.linalg.norm(gv))
        trace.append({"phase": "lbfgs", "iter": len(trace), "loss": fv, "grad_norm": gn})
        if gn < 0.5 * tol * (1.0 + fv):
            raise StopIteration

    res = minimize(fg, theta, jac=True, method="L-BFGS-B", callback=callback,
                   options={"maxiter": cfg.max_iters, "maxcor": 30, "gtol": 0.0,
                            "ftol": 0.0, "maxls": 50})
    theta = res.x
    f, g = fg(theta)
    gnorm = float(np.linalg.norm(g))
    trace.append({"phase": "final", "iter": len(trace), "loss": f, "grad_norm": gnorm})
    if gnorm >= cfg.grad_rtol * (1.0 + f):
        raise ConvergenceError(
            f"gradient norm {gnorm:.3g} above tolerance {cfg.grad_rtol * (1 + f):.3g}", trace
        )
    w, b = _unpack(theta, shapes)
    return TinyModel(cfg, [a.copy() for a in w], [a.copy() for a in b], x, y, seed, trace)


# ---------------------------------------------------------------------------
# model specs (used by the CLI)


def model_from_spec(spec: dict):
    """Build a model from a JSON-style spec.

    ``{"kind": "quadratic", "z": [...], "dims": [...], "seed": 0, "base": 1.0}``
    or ``{"kind": "tiny", "seed": 0, ...TinyConfig fields}``.
    """
    kind = spec.get("kind")
    if kind == "quadratic":
        return QuadraticModel.random(spec["z"], spec["dims"], int(spec.get("seed", 0)),
                                     float(spec.get("base", 1.0)))
    if kind == "tiny":
        fields = {k: v for k, v in spec.items() if k not in ("kind", "seed")}
        return train_tiny(TinyConfig(**fields), int(spec.get("seed", 0)))
    raise InvalidArgument(f"unknown model kind {kind!r}")


def default_tiny_spec(seed: int = 0) -> dict:
    return {"kind": "tiny", "seed": seed, **asdict(TinyConfig())}


# ---------------------------------------------------------------------------
# Linearity sweep: measured vs predicted loss increase

REPORT_FIELDS = ["config_id", "avg_bits", "layer_or_global", "t2", "measured_delta",
                 "predicted_delta", "in_range", "diverged"]
DIVERGENCE = 0.25


@dataclass
class ExperimentConfig:
    """One uniform quantization config applied to every layer."""

    config_id: str
    grid: Grid | None
    config: QuantConfig

    @property
    def avg_bits(self) -> float:
        from .allocator import effective_bitwidth

        c = self.config
        if c.lossless:
            return 64.0 + c.scale_bits / c.g
        return effective_bitwidth(c.p, c.n, c.g, c.scale_bits)


def default_sweep(g: int = 64, seed: int = 0, sizes=(2, 4, 8, 16, 32, 64, 256)) -> list[ExperimentConfig]:
    """Lloyd-Max scalar grids at several sizes, plus the all-zero grid."""
    out = []
    for n in sizes:
        grid = lloyd_max_1d(n)
        out.append(ExperimentConfig(f"lm{n}_g{g}", grid, QuantConfig.for_grid(grid, g, seed)))
    z = zero_grid(1)
    out.append(ExperimentConfig(f"zero_g{g}", z, QuantConfig.for_grid(z, g, seed)))
    return out


@dataclass
class ExperimentRow:
    config_id: str
    avg_bits: float
    layer_or_global: str
    t2: float
    measured_delta: float
    predicted_delta: float
    in_range: bool

    @property
    def rel_error(self) -> float:
        if self.measured_delta == 0:
            return 0.0 if self.predicted_delta == 0 else math.inf
        return abs(self.predicted_delta - self.measured_delta) / abs(self.measured_delta)

    @property
    def diverged(self) -> bool:
        return self.rel_error > DIVERGENCE

    def as_csv(self) -> list[str]:
        return [self.config_id, "" if math.isnan(self.avg_bits) else repr(self.avg_bits),
                self.layer_or_global, repr(self.t2), repr(self.measured_delta),
                repr(self.predicted_delta), str(int(self.in_range)), str(int(self.diverged))]


@dataclass
class LinearityReport:
    rows: list[ExperimentRow]
    alphas: AlphaVector | None
    base: float

    def in_range_rows(self) -> list[ExperimentRow]:
        return [r for r in self.rows if r.in_range]

    def max_in_range_error(self) -> float:
        errs = [r.rel_error for r in self.in_range_rows()]
        return max(errs) if errs else 0.0

    def breakdown_configs(self) -> list[str]:
        """Configs outside the calibrated range whose prediction diverged."""
        return sorted({r.config_id for r in self.rows if not r.in_range and r.diverged})

    def write_csv(self, path) -> None:
        _atomic_csv(path, REPORT_FIELDS, [r.as_csv() for r in self.rows])


def _atomic_csv(path, header, rows) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _reseeded(cfg: QuantConfig, seed: int) -> QuantConfig:
    return QuantConfig(cfg.g, cfg.p, cfg.n, seed, cfg.scale_bits, cfg.lossless)


def run_linearity_experiment(model, t_levels, reps: int = 16, output_path=None, *,
                             alphas: AlphaVector | None = None,
                             configs: Sequence[ExperimentConfig] | None = None,
                             seed: int = 0, quant_seeds: int = 16,
                             t_range=DEFAULT_T_RANGE, per_layer: bool = True) -> LinearityReport:
    """Compare measured and predicted loss increases (a linearity sweep).

    Noise rows: every layer perturbed at relative level ``t`` (averaged over
    ``reps`` draws).  Quantization rows: each config applied to one layer at
    a time (per-layer rows) and to all layers at once (global row), averaged
    over ``quant_seeds`` rotation seeds since the model is about expected
    loss.  A row is in range when every perturbed layer has
    ``t_l <= t_range[1]``; rows whose relative prediction error exceeds 25%
    are marked diverged.  Without ``alphas``, they are calibrated here on the
    in-range part of ``t_levels``.  An empty ``t_levels`` gives an empty
    report.
    """
    t_levels = np.asarray(t_levels, dtype=np.float64).reshape(-1)
    ref = [np.array(w) for w in model.layers]
    base = float(model.loss(ref))
    if t_levels.size == 0:
        report = LinearityReport([], alphas, base)
        if output_path is not None:
            report.write_csv(output_path)
        return report
    lo, hi = t_range
    if alphas is None:
        cal = t_levels[(t_levels >= lo) & (t_levels <= hi)]
        if cal.size < 2:
            cal = uniform_t_levels(8, t_range)
        alphas = calibrate_alphas(model, cal, reps, "loss", seed, t_range=t_range)
    a = np.asarray(alphas.alphas, dtype=np.float64)
    L = len(ref)
    if a.shape != (L,):
        raise InvalidArgument(f"{a.size} alphas for {L} layers")
    rows: list[ExperimentRow] = []
    for j, t in enumerate(t_levels):
        draws = []
        for child in np.random.SeedSequence([int(seed), 0x4E01, j]).spawn(reps):
            rng = np.random.default_rng(child)
            draws.append(model.loss([gaussian_noise_insert(w, float(t), rng) for w in ref]) - base)
        rows.append(ExperimentRow(f"noise_t{t:.4g}", math.nan, "global", float(t * t),
                                  float(np.mean(draws)), float(a.sum() * t * t),
                                  bool(t <= hi + 1e-12)))
    configs = default_sweep(seed=seed) if configs is None else list(configs)
    seeds = [seed + k for k in range(max(1, quant_seeds))]
    for ec in configs:
        layer_d = np.zeros((len(seeds), L))
        glob_d = np.zeros(len(seeds))
        t2 = np.zeros((len(seeds), L))
        try:
            for k, s in enumerate(seeds):
                blocks, t2[k] = quantize_layers(model, [(ec.grid, _reseeded(ec.config, s))] * L)
                glob_d[k] = model.loss(blocks) - base
                if per_layer:
                    for l in range(L):
                        layer_d[k, l] = model.loss(ref[:l] + [blocks[l]] + ref[l + 1:]) - base
        except InvalidArgument:
            continue  # config not applicable to these layer shapes
        t2m = t2.mean(axis=0)
        if per_layer:
            for l in range(L):
                rows.append(ExperimentRow(ec.config_id, ec.avg_bits, f"layer{l}", float(t2m[l]),
                                          float(layer_d[:, l].mean()), float(a[l] * t2m[l]),
                                          bool(math.sqrt(t2m[l]) <= hi)))
        rows.append(ExperimentRow(ec.config_id, ec.avg_bits, "global", float(t2m.mean()),
                                  float(glob_d.mean()), float(np.dot(a, t2m)),
                                  bool(math.sqrt(t2m.max()) <= hi)))
    report = LinearityReport(rows, alphas, base)
    if output_path is not None:
        report.write_csv(output_path)
    return report


# ---------------------------------------------------------------------------
# Allocation curve experiment, predicted vs measured

CURVE_FIELDS = ["b_max", "avg_bits", "predicted_delta", "measured_delta", "in_range", "diverged",
                "choice"]


@dataclass
class CurveRow:
    b_max: float
    avg_bits: float
    predicted_delta: float
    measured_delta: float
    in_range: bool
    choice: str

    @property
    def rel_error(self) -> float:
        if self.measured_delta == 0:
            return 0.0 if self.predicted_delta == 0 else math.inf
        return abs(self.predicted_delta - self.measured_delta) / abs(self.measured_delta)

    def as_csv(self) -> list[str]:
        nan = math.isnan(self.avg_bits)
        return [repr(self.b_max), "" if nan else repr(self.avg_bits),
                "" if nan else repr(self.predicted_delta), "" if nan else repr(self.measured_delta),
                str(int(self.in_range)), str(int(self.rel_error > DIVERGENCE)) if not nan else "",
                self.choice]


def run_allocation_experiment(model, options, alphas, budgets, output_path=None, *,
                              menu=None, quant_seeds: int = 16, t_range=DEFAULT_T_RANGE) -> list[CurveRow]:
    """Solve the allocation for each budget and measure the chosen model.

    The measured increase is averaged over ``quant_seeds`` rotation seeds.
    Infeasible budgets produce a row with empty numeric fields.
    """
    from .allocator import build_menu, predicted_curve

    if menu is None:
        menu = build_menu(model, options)
    ref = [np.array(w) for w in model.layers]
    base = float(model.loss(ref))
    rows = []
    for point in predicted_curve(menu, alphas, budgets):
        alloc = point.allocation
        if alloc is None:
            rows.append(CurveRow(point.b_max, math.nan, math.nan, math.nan, False, point.error or ""))
            continue
        deltas, t2s = [], []
        for s in range(quant_seeds):
            plan = [(options[j].grid, _reseeded(options[j].config, options[j].config.seed + s))
                    for j in alloc.choice]
            blocks, t2 = quantize_layers(model, plan)
            deltas.append(model.loss(blocks) - base)
            t2s.append(t2)
        t2m = np.mean(np.asarray(t2s), axis=0)
        rows.append(CurveRow(point.b_max, alloc.avg_bits_per_param, alloc.predicted_delta,
                             float(np.mean(deltas)), bool(np.sqrt(t2m.max()) <= t_range[1]),
                             "|".join(alloc.labels)))
    if output_path is not None:
        _atomic_csv(output_path, CURVE_FIELDS, [r.as_csv() for r in rows])
    return rows
