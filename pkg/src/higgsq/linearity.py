"""Linear error model: noise insertion, alpha calibration and loss prediction.

The model says that the expected loss after perturbing layer ``l`` with
relative Frobenius error ``t_l`` is ``base + sum_l alpha_l * t_l^2`` for small
``t``, where ``alpha_l`` does not depend on how the perturbation was made.
This module estimates ``alpha`` with Gaussian noise, measures ``t^2`` for
real quantizers and provides the Hessian and batch-additivity probes that
check the model's assumptions.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import HiggsError, InvalidArgument
from .grids import Grid
from .quantizer import QuantConfig, decode, encode, measure_relative_error

DEFAULT_T_RANGE = (0.01, 0.2)
R2_WARN = 0.9


class NumericError(HiggsError, ArithmeticError):
    """A model produced non-finite outputs."""


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def gaussian_noise_insert(w, t: float, seed: int | np.random.Generator = 0) -> np.ndarray:
    """Return ``w + t * ||w||_F / sqrt(d) * N(0, I)``.

    The perturbation is unbiased with ``E||out - w||^2 = t^2 ||w||^2``.
    """
    if t < 0:
        raise InvalidArgument(f"noise level t must be >= 0, got {t}")
    w = np.asarray(w, dtype=np.float64)
    if t == 0:
        return w.copy()
    norm = float(np.linalg.norm(w))
    if norm == 0:
        raise InvalidArgument("cannot scale noise to a zero-norm block")
    rng = seed if isinstance(seed, np.random.Generator) else _rng(seed)
    return w + (t * norm / math.sqrt(w.size)) * rng.standard_normal(w.shape)


def with_layer(weights: Sequence[np.ndarray], l: int, block: np.ndarray) -> list[np.ndarray]:
    out = list(weights)
    out[l] = block
    return out


# ---------------------------------------------------------------------------
# objectives


def kl_objective(model, perturbed, inputs, reference=None) -> float:
    """Mean KL(reference || perturbed) of the output distributions over ``inputs``."""
    ref = model.layers if reference is None else reference
    lp_ref = model.log_probs(ref, inputs)
    lp = model.log_probs(perturbed, inputs)
    if not (np.all(np.isfinite(lp_ref)) and np.all(np.isfinite(lp))):
        raise NumericError("model produced non-finite log-probabilities")
    kl = np.sum(np.exp(lp_ref) * (lp_ref - lp), axis=1)
    # clamp tiny negative rounding so KL >= 0 holds exactly
    return float(max(np.mean(kl), 0.0))


def make_objective(model, objective: str = "loss", *, seed: int = 0,
                   kl_samples: int = 4096) -> Callable[[list[np.ndarray]], float]:
    if objective == "loss":
        return model.loss
    if objective == "kl":
        if not hasattr(model, "log_probs"):
            raise InvalidArgument("KL objective needs a model with output distributions")
        inputs = model.random_inputs(kl_samples, seed)
        ref = [np.array(w) for w in model.layers]
        return lambda ws: kl_objective(model, ws, inputs, ref)
    raise InvalidArgument(f"unknown objective {objective!r}; use 'loss' or 'kl'")


# ---------------------------------------------------------------------------
# calibration


@dataclass
class AlphaVector:
    alphas: np.ndarray
    r2: np.ndarray
    stderr: np.ndarray
    t_levels: np.ndarray
    deltas: np.ndarray  # (L, J, R)
    objective: str = "loss"
    reps: int = 1
    seed: int = 0
    t_range: tuple[float, float] = DEFAULT_T_RANGE
    base: float = 0.0
    intercept_fit: list[tuple[float, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.alphas)

    @property
    def flagged(self) -> list[int]:
        """Layers whose fit is poor or undefined (R^2 < 0.9 or NaN)."""
        return [l for l, r in enumerate(self.r2) if not (r >= R2_WARN)]

    def summary(self) -> dict:
        return {
            "alphas": [float(a) for a in self.alphas],
            "r2": [None if math.isnan(r) else float(r) for r in self.r2],
            "stderr": [float(s) for s in self.stderr],
            "intercept_fit": [list(map(float, p)) for p in self.intercept_fit],
            "t_levels": [float(t) for t in self.t_levels],
            "t_range": list(self.t_range),
            "objective": self.objective,
            "reps": self.reps,
            "seed": self.seed,
            "base": self.base,
            "flagged_layers": self.flagged,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "t", "rep", "delta"])
            L, J, R = self.deltas.shape
            for l in range(L):
                for j in range(J):
                    for r in range(R):
                        w.writerow([l, repr(float(self.t_levels[j])), r, repr(float(self.deltas[l, j, r]))])

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)

    @classmethod
    def from_summary(cls, data: dict) -> "AlphaVector":
        L = len(data["alphas"])
        r2 = [float("nan") if v is None else v for v in data.get("r2", [float("nan")] * L)]
        return cls(
            alphas=np.asarray(data["alphas"], dtype=np.float64),
            r2=np.asarray(r2, dtype=np.float64),
            stderr=np.asarray(data.get("stderr", [0.0] * L), dtype=np.float64),
            t_levels=np.asarray(data.get("t_levels", []), dtype=np.float64),
            deltas=np.zeros((L, 0, 0)),
            objective=data.get("objective", "loss"),
            reps=int(data.get("reps", 1)),
            seed=int(data.get("seed", 0)),
            t_range=tuple(data.get("t_range", DEFAULT_T_RANGE)),
            base=float(data.get("base", 0.0)),
        )


def fit_through_origin(t_levels, deltas) -> tuple[float, float, float]:
    """Least squares ``delta ~ alpha * t^2`` without intercept.

    Returns ``(alpha, r2, stderr)``; an all-zero ``deltas`` gives alpha 0 and
    an undefined (NaN) R^2.
    """
    x = np.asarray(t_levels, dtype=np.float64) ** 2
    y = np.asarray(deltas, dtype=np.float64)
    sxx = float(x @ x)
    if not np.any(y):
        return 0.0, float("nan"), 0.0
    alpha = float(x @ y) / sxx
    resid = y - alpha * x
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    dof = max(len(y) - 1, 1)
    return alpha, r2, math.sqrt(ss_res / dof / sxx)


def uniform_t_levels(count: int, t_range=DEFAULT_T_RANGE) -> np.ndarray:
    return np.linspace(t_range[0], t_range[1], count)


def calibrate_alphas(model, t_levels, reps: int = 16, objective: str = "loss",
                     seed: int = 0, *, t_range=DEFAULT_T_RANGE,
                     kl_samples: int = 4096) -> AlphaVector:
    """Estimate per-layer alphas by Gaussian noise insertion.

    For each layer ``l`` and level ``t_j`` the objective increase is averaged
    over ``reps`` independent noise draws (seeded from ``(seed, l, j, rep)``),
    with all other layers left at their reference values.  Alphas come from
    a least-squares fit through the origin against ``t_j^2``.
    """
    t_levels = np.asarray(t_levels, dtype=np.float64)
    if t_levels.size < 2:
        raise InvalidArgument("need at least two noise levels")
    if reps < 1:
        raise InvalidArgument("reps must be >= 1")
    lo, hi = t_range
    if np.any(t_levels <= 0) or np.any(t_levels < lo - 1e-12) or np.any(t_levels > hi + 1e-12):
        raise InvalidArgument(f"noise levels must be > 0 and inside [{lo}, {hi}]")
    f = make_objective(model, objective, seed=seed, kl_samples=kl_samples)
    ref = [np.array(w) for w in model.layers]
    base = f(ref)
    L, J = len(ref), t_levels.size
    deltas = np.empty((L, J, reps))
    for l in range(L):
        for j, t in enumerate(t_levels):
            for r in range(reps):
                noisy = gaussian_noise_insert(ref[l], float(t), _rng(seed, l, j, r))
                deltas[l, j, r] = f(with_layer(ref, l, noisy)) - base
    mean = deltas.mean(axis=2)
    fits = [fit_through_origin(t_levels, mean[l]) for l in range(L)]
    icpt = []
    for l in range(L):
        slope, intercept = np.polyfit(t_levels ** 2, mean[l], 1)
        icpt.append((float(slope), float(intercept)))
    return AlphaVector(
        alphas=np.array([a for a, _, _ in fits]),
        r2=np.array([r for _, r, _ in fits]),
        stderr=np.array([s for _, _, s in fits]),
        t_levels=t_levels,
        deltas=deltas,
        objective=objective,
        reps=reps,
        seed=seed,
        t_range=(float(lo), float(hi)),
        base=float(base),
        intercept_fit=icpt,
    )


@dataclass
class LayerAdditivity:
    t: float
    joint: float
    summed: float
    rel_error: float


def layer_additivity(model, t: float, reps: int = 16, seed: int = 0, objective: str = "loss") -> LayerAdditivity:
    """Joint increase from perturbing all layers vs the sum of single-layer increases.

    Both sides reuse the same noise draws, so the comparison isolates the
    cross-layer interaction that the linear model neglects.
    """
    if t <= 0 or reps < 1:
        raise InvalidArgument("need t > 0 and reps >= 1")
    f = make_objective(model, objective, seed=seed)
    ref = [np.array(w) for w in model.layers]
    base = f(ref)
    joint, single = [], []
    for r in range(reps):
        noisy = [gaussian_noise_insert(w, t, _rng(seed, 0xADD, l, r)) for l, w in enumerate(ref)]
        joint.append(f(noisy) - base)
        single.append(sum(f(with_layer(ref, l, noisy[l])) - base for l in range(len(ref))))
    j, s = float(np.mean(joint)), float(np.mean(single))
    return LayerAdditivity(float(t), j, s, abs(j - s) / max(abs(s), 1e-300))


def predict_loss(base_loss: float, alphas, t_squared) -> float:
    """``base + sum_l alpha_l * t_l^2``."""
    a = np.asarray(alphas.alphas if isinstance(alphas, AlphaVector) else alphas, dtype=np.float64)
    t2 = np.asarray(t_squared, dtype=np.float64)
    if a.shape != t2.shape:
        raise InvalidArgument(f"{a.size} alphas but {t2.size} t^2 values")
    return float(base_loss + math.fsum(a * t2))


# ---------------------------------------------------------------------------
# real quantization


def quantize_layers(model, plan: Sequence[tuple[Grid | None, QuantConfig]]):
    """Quantize every layer per ``plan``; returns (dequantized blocks, t^2 list)."""
    layers = model.layers
    if len(plan) != len(layers):
        raise InvalidArgument(f"plan has {len(plan)} entries for {len(layers)} layers")
    blocks, t2 = [], []
    for w, (grid, cfg) in zip(layers, plan):
        q = encode(w, grid, cfg)
        blocks.append(decode(q, grid))
        t2.append(measure_relative_error(w, q, grid))
    return blocks, t2


def measure_layer_errors(model, plan) -> list[float]:
    """Per-layer relative quantization error t_l^2 under ``plan``."""
    return quantize_layers(model, plan)[1]


# ---------------------------------------------------------------------------
# Hessian / additivity probes


@dataclass
class HessianProbe:
    matrix: np.ndarray
    subset: list[tuple[int, int]]
    symmetry_defect: float
    diag_dominance: float
    offdiag_mass: float
    min_eig: float
    max_eig: float
    grad_norm: float


def _flat_grad(model, weights, subset) -> np.ndarray:
    grads = model.gradient(weights)
    return np.array([np.asarray(grads[l]).reshape(-1)[i] for l, i in subset])


def scaled_hessian_block(model, subset, h: float = 1e-4) -> HessianProbe:
    """Finite-difference Hessian on ``subset`` scaled by the block norms.

    ``subset`` is a list of ``(layer, flat_index)`` pairs (at most 2000).
    Uses central differences of the gradient when the model has one and
    second differences of the loss otherwise.  The returned matrix is
    ``D A D`` with ``D`` holding ``||W_l||_F`` for each coordinate's layer.
    """
    if h <= 0:
        raise InvalidArgument("finite-difference step must be > 0")
    subset = [(int(l), int(i)) for l, i in subset]
    k = len(subset)
    if not 1 <= k <= 2000:
        raise InvalidArgument("subset size must be between 1 and 2000")
    ref = [np.array(w, dtype=np.float64) for w in model.layers]

    def shifted(moves):
        ws = [w.copy() for w in ref]
        for (l, i), step in moves:
            ws[l].reshape(-1)[i] += step
        return ws

    a = np.empty((k, k))
    has_grad = hasattr(model, "gradient")
    if has_grad:
        for c, coord in enumerate(subset):
            gp = _flat_grad(model, shifted([(coord, h)]), subset)
            gm = _flat_grad(model, shifted([(coord, -h)]), subset)
            a[:, c] = (gp - gm) / (2 * h)
        grad_norm = math.sqrt(sum(float(np.sum(g * g)) for g in model.gradient(ref)))
    else:
        f0 = model.loss(ref)
        for r, cr in enumerate(subset):
            for c, cc in enumerate(subset):
                if r == c:
                    a[r, c] = (model.loss(shifted([(cr, h)])) - 2 * f0
                               + model.loss(shifted([(cr, -h)]))) / h ** 2
                else:
                    a[r, c] = (model.loss(shifted([(cr, h), (cc, h)]))
                               - model.loss(shifted([(cr, h), (cc, -h)]))
                               - model.loss(shifted([(cr, -h), (cc, h)]))
                               + model.loss(shifted([(cr, -h), (cc, -h)]))) / (4 * h * h)
        grad_norm = float("nan")
    norms = np.array([np.linalg.norm(ref[l]) for l, _ in subset])
    m = norms[:, None] * a * norms[None, :]
    fro = np.linalg.norm(m)
    diag = np.diag(m)
    off = m - np.diag(diag)
    eig = np.linalg.eigvalsh(0.5 * (m + m.T))
    return HessianProbe(
        matrix=m,
        subset=subset,
        symmetry_defect=float(np.linalg.norm(m - m.T) / fro) if fro > 0 else 0.0,
        diag_dominance=float(np.abs(off).sum() / np.abs(diag).sum()),
        offdiag_mass=float(np.linalg.norm(off) / np.linalg.norm(diag)),
        min_eig=float(eig[0]),
        max_eig=float(eig[-1]),
        grad_norm=grad_norm,
    )


def sample_subset(model, per_layer: int, seed: int = 0) -> list[tuple[int, int]]:
    """Pick ``per_layer`` random coordinates from every layer."""
    out = []
    for l, w in enumerate(model.layers):
        idx = _rng(seed, l, 0x5B).choice(np.asarray(w).size, size=min(per_layer, np.asarray(w).size),
                                          replace=False)
        out.extend((l, int(i)) for i in sorted(idx))
    return out


@dataclass
class AdditivityReport:
    batch_size: int
    full: float
    summed: float
    defect: float
    passed: bool
    reduction: str


def batch_additivity_check(model, x, y, reduction: str = "sum", rtol: float = 1e-9) -> AdditivityReport:
    """Compare the full-batch loss against the sum of single-sample losses.

    Each sample is evaluated in its own forward pass.  Only the sum-form
    objective is additive; ``reduction="mean"`` is expected to fail for
    batches larger than one.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    ref = model.layers
    full = model.data_loss(ref, x, y, reduction)
    parts = [model.data_loss(ref, x[i : i + 1], y[i : i + 1], "sum") for i in range(len(y))]
    summed = math.fsum(parts)
    scale = max(abs(summed), abs(full), 1e-300)
    defect = abs(full - summed) / scale
    return AdditivityReport(len(y), float(full), float(summed), float(defect), defect < rtol, reduction)
