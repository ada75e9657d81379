"""Command-line front end.

Subcommands: ``grid build``, ``quantize``, ``dequantize``, ``calibrate``,
``menu``, ``allocate`` and ``linearity``.  Exit codes: 0 ok, 2 invalid
arguments, 3 I/O failure, 4 corrupt input, 5 infeasible budget.  Every
command echoes the seeds it used; ``--json`` switches to one JSON object on
stdout.  Outputs are written to a temporary file and renamed into place, so a
failed run leaves nothing behind.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .allocator import (
    QuantMenu,
    QuantOption,
    build_menu,
    effective_bitwidth,
    predicted_curve,
    solve_mckp,
)
from .errors import ConvergenceError, CorruptionError, HiggsError, InfeasibleBudget, InvalidArgument
from .grids import BUILDERS, Grid, build_grid, estimate_grid_mse
from .harness import QuadraticModel, default_tiny_spec, model_from_spec, run_linearity_experiment
from .linearity import AlphaVector, calibrate_alphas
from .quantizer import QuantConfig, QuantizedTensor, decode, encode, measure_relative_error

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_CORRUPT, EXIT_INFEASIBLE, EXIT_OTHER = 0, 2, 3, 4, 5, 1
SEED_ENV = "HIGGSQ_SEED"
DEFAULT_QUADRATIC = {"kind": "quadratic", "z": [0.5, 1.0, 2.0, 4.0], "dims": [1024, 2048, 4096, 8192],
                     "base": 1.0}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# file helpers


def write_atomic(path: str, data: bytes | str) -> None:
    """Write via a temp file in the target directory, then rename."""
    mode = "w" if isinstance(data, str) else "wb"
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _check_input(path: str) -> None:
    if not os.path.isfile(path):
        raise CliError(f"input file not found: {path}", EXIT_IO)


def _check_output(path: str | None) -> None:
    if path is None:
        return
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory) or not os.access(directory, os.W_OK):
        raise CliError(f"output directory not writable: {directory}", EXIT_IO)


def sidecar_path(path: str) -> str:
    return path + ".json"


def load_tensor(path: str) -> np.ndarray:
    """Raw little-endian float blob with ``<path>.json`` sidecar, or a text file."""
    _check_input(path)
    if path.endswith(".txt"):
        return np.atleast_1d(np.loadtxt(path, dtype=np.float64))
    side = sidecar_path(path)
    _check_input(side)
    with open(side) as fh:
        meta = json.load(fh)
    dtype = {"float32": "<f4", "float64": "<f8"}.get(meta.get("dtype"))
    if dtype is None:
        raise CliError(f"sidecar dtype must be float32 or float64, got {meta.get('dtype')!r}", EXIT_ARGS)
    shape = tuple(int(s) for s in meta["shape"])
    with open(path, "rb") as fh:
        raw = fh.read()
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) != count * np.dtype(dtype).itemsize:
        raise CliError(f"{path}: expected {count} values of {meta['dtype']}, file has {len(raw)} bytes",
                       EXIT_CORRUPT)
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float64)


def save_tensor(path: str, arr: np.ndarray, dtype: str = "float64") -> None:
    code = {"float32": "<f4", "float64": "<f8"}[dtype]
    write_atomic(path, np.ascontiguousarray(arr, dtype=code).tobytes())
    write_atomic(sidecar_path(path), json.dumps({"shape": list(arr.shape), "dtype": dtype}) + "\n")


def _read_bytes(path: str) -> bytes:
    _check_input(path)
    with open(path, "rb") as fh:
        return fh.read()


def load_grid(path: str) -> Grid:
    return Grid.from_bytes(_read_bytes(path))


def load_model(spec: str, seed: int):
    """``tiny``, ``quadratic`` or a path to a JSON model spec."""
    if spec == "tiny":
        data = default_tiny_spec(seed)
    elif spec == "quadratic":
        data = dict(DEFAULT_QUADRATIC, seed=seed)
    else:
        _check_input(spec)
        with open(spec) as fh:
            data = json.load(fh)
        data.setdefault("seed", seed)
    return model_from_spec(data), data


# ---------------------------------------------------------------------------
# commands


def cmd_grid_build(args) -> dict:
    _check_output(args.out)
    grid = build_grid(args.builder, args.p, args.n, args.seed)
    stderr = float(grid.provenance.get("mse_stderr", 0.0))
    if args.mc_samples:
        mean, stderr = estimate_grid_mse(grid, args.mc_samples, args.seed, workers=args.threads)
        grid = grid.with_mse(mean, mse_stderr=stderr)
    if args.out:
        write_atomic(args.out, grid.to_bytes())
    return {
        "builder": args.builder, "p": grid.p, "n": grid.n, "metric": grid.metric,
        "mse_per_dim": grid.mse_per_dim, "mse_stderr": stderr, "out": args.out,
        "text": f"mse_per_dim = {grid.mse_per_dim:.6f} ± {stderr:.2g}",
    }


def cmd_quantize(args) -> dict:
    _check_output(args.out)
    w = load_tensor(args.input)
    if args.lossless:
        grid = None
        cfg = QuantConfig(args.g, 1, 1, args.seed, 64, lossless=True)
    else:
        if not args.grid:
            raise CliError("--grid is required unless --lossless", EXIT_ARGS)
        grid = load_grid(args.grid)
        cfg = QuantConfig.for_grid(grid, args.g, args.seed, args.scale_bits)
    q = encode(w, grid, cfg)
    t2 = measure_relative_error(w, q, grid) if np.any(w) else 0.0
    bits = 64.0 + cfg.scale_bits / cfg.g if cfg.lossless else effective_bitwidth(cfg.p, cfg.n, cfg.g, cfg.scale_bits)
    blob = q.to_bytes()
    write_atomic(args.out, blob)
    return {
        "t2": t2, "effective_bits": bits, "payload_bits": q.payload_bits, "file_bytes": len(blob),
        "g": cfg.g, "p": cfg.p, "n": cfg.n, "scale_bits": cfg.scale_bits, "lossless": cfg.lossless,
        "out": args.out,
        "text": f"t2 = {t2:.6g}\neffective_bits = {bits:.4f}\npayload_bits = {q.payload_bits}",
    }


def cmd_dequantize(args) -> dict:
    _check_output(args.out)
    q = QuantizedTensor.from_bytes(_read_bytes(args.input))
    grid = None if q.config.lossless else (load_grid(args.grid) if args.grid else None)
    if grid is None and not q.config.lossless:
        raise CliError("--grid is required for non-lossless tensors", EXIT_ARGS)
    w = decode(q, grid)
    save_tensor(args.out, w, args.dtype)
    return {"shape": list(w.shape), "dtype": args.dtype, "out": args.out,
            "text": f"wrote {w.size} values to {args.out}"}


def cmd_calibrate(args) -> dict:
    _check_output(args.out)
    _check_output(args.deltas_csv)
    model, spec = load_model(args.model, args.seed)
    levels = np.linspace(args.t_min, args.t_max, args.levels)
    av = calibrate_alphas(model, levels, args.reps, args.objective, args.seed,
                          t_range=(args.t_min, args.t_max), kl_samples=args.kl_samples)
    out = av.summary()
    out["model"] = spec
    if isinstance(model, QuadraticModel):
        out["analytic_alphas"] = [float(a) for a in model.analytic_alphas()]
    if args.out:
        write_atomic(args.out, json.dumps(out, indent=2) + "\n")
    if args.deltas_csv:
        tmp = args.deltas_csv + ".part"
        av.write_csv(tmp)
        os.replace(tmp, args.deltas_csv)
    lines = [f"layer {l}: alpha = {a:.6g}  R2 = {r:.4f}" for l, (a, r) in enumerate(zip(av.alphas, av.r2))]
    if "analytic_alphas" in out:
        lines += [f"layer {l}: analytic = {a:.6g}" for l, a in enumerate(out["analytic_alphas"])]
    out["text"] = "\n".join(lines)
    return out


def cmd_menu(args) -> dict:
    _check_output(args.out_csv)
    _check_output(args.out_json)
    model, spec = load_model(args.model, args.seed)
    options = []
    for path in args.grids:
        grid = load_grid(path)
        label = os.path.splitext(os.path.basename(path))[0]
        options.append(QuantOption(label, grid, QuantConfig.for_grid(grid, args.g, args.seed, args.scale_bits)))
    menu = build_menu(model, options)
    tmp_c, tmp_j = args.out_csv + ".part", args.out_json + ".part"
    menu.write(tmp_c, tmp_j)
    os.replace(tmp_c, args.out_csv)
    os.replace(tmp_j, args.out_json)
    return {"options": menu.labels, "layers": len(menu.dims), "model": spec,
            "text": f"menu with {len(menu.labels)} options x {len(menu.dims)} layers"}


def cmd_allocate(args) -> dict:
    _check_output(args.out)
    _check_output(args.curve_csv)
    _check_input(args.menu_csv)
    _check_input(args.menu_json)
    _check_input(args.alphas)
    menu = QuantMenu.read(args.menu_csv, args.menu_json)
    with open(args.alphas) as fh:
        alphas = AlphaVector.from_summary(json.load(fh))
    budgets = sorted(args.budget)
    if len(budgets) == 1:
        alloc = solve_mckp(menu, alphas, budgets[0])
        out = alloc.to_dict()
        out["text"] = (f"choice = {' '.join(alloc.labels)}\navg_bits = {alloc.avg_bits_per_param:.6f}\n"
                       f"predicted_delta = {alloc.predicted_delta:.6g}")
    else:
        points = predicted_curve(menu, alphas, budgets)
        if all(pt.allocation is None for pt in points):
            solve_mckp(menu, alphas, budgets[-1])  # raises InfeasibleBudget with the minimum
        curve = [{"b_max": pt.b_max, "allocation": None if pt.allocation is None else pt.allocation.to_dict(),
                  "error": pt.error} for pt in points]
        out = {"curve": curve}
        lines = ["b_max,avg_bits,predicted_delta,choice"]
        for pt in points:
            a = pt.allocation
            lines.append(f"{pt.b_max!r},,,infeasible" if a is None else
                         f"{pt.b_max!r},{a.avg_bits_per_param!r},{a.predicted_delta!r},{'|'.join(a.labels)}")
        if args.curve_csv:
            write_atomic(args.curve_csv, "\n".join(lines) + "\n")
        out["text"] = "\n".join(lines)
    if args.out:
        write_atomic(args.out, json.dumps({k: v for k, v in out.items() if k != "text"}, indent=2) + "\n")
    return out


def cmd_linearity(args) -> dict:
    _check_output(args.out)
    model, spec = load_model(args.model, args.seed)
    alphas = None
    if args.alphas:
        _check_input(args.alphas)
        with open(args.alphas) as fh:
            alphas = AlphaVector.from_summary(json.load(fh))
    tmp = args.out + ".part"
    try:
        report = run_linearity_experiment(model, args.t_levels, args.reps, tmp, alphas=alphas,
                                          seed=args.seed, quant_seeds=args.quant_seeds)
        os.replace(tmp, args.out)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return {"rows": len(report.rows), "max_in_range_error": report.max_in_range_error(),
            "breakdown_configs": report.breakdown_configs(), "model": spec, "out": args.out,
            "text": (f"{len(report.rows)} rows -> {args.out}\n"
                     f"max in-range relative error = {report.max_in_range_error():.4f}\n"
                     f"diverged outside range: {', '.join(report.breakdown_configs()) or 'none'}")}


# ---------------------------------------------------------------------------
# parser


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _env_seed() -> int:
    raw = os.environ.get(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=_env_seed(),
                        help=f"RNG / rotation seed (default: ${SEED_ENV} or 0)")
    common.add_argument("--json", action="store_true", help="print one JSON object instead of text")
    common.add_argument("--threads", type=_positive_int, default=1,
                        help="worker bound; results do not depend on it")

    parser = argparse.ArgumentParser(prog="higgsq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    grid = sub.add_parser("grid", help="grid operations")
    gsub = grid.add_subparsers(dest="grid_command", required=True)
    gb = gsub.add_parser("build", parents=[common], help="build a grid and write an HGRD file")
    gb.add_argument("--builder", choices=BUILDERS, default="clvq")
    gb.add_argument("-p", type=_positive_int, default=1)
    gb.add_argument("-n", type=_positive_int, required=True)
    gb.add_argument("--mc-samples", type=_positive_int, default=None,
                    help="re-estimate the MSE by Monte Carlo with this many samples")
    gb.add_argument("--out")
    gb.set_defaults(func=cmd_grid_build)

    q = sub.add_parser("quantize", parents=[common], help="encode a tensor into an HQTZ file")
    q.add_argument("--input", required=True)
    q.add_argument("--grid")
    q.add_argument("-g", type=_positive_int, default=1024)
    q.add_argument("--scale-bits", type=int, choices=(16, 32, 64), default=16)
    q.add_argument("--lossless", action="store_true")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_quantize)

    d = sub.add_parser("dequantize", parents=[common], help="decode an HQTZ file")
    d.add_argument("--input", required=True)
    d.add_argument("--grid")
    d.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dequantize)

    c = sub.add_parser("calibrate", parents=[common], help="estimate per-layer alphas")
    c.add_argument("--model", default="quadratic", help="tiny, quadratic or a JSON spec path")
    c.add_argument("--levels", type=_positive_int, default=8)
    c.add_argument("--t-min", type=float, default=0.01)
    c.add_argument("--t-max", type=float, default=0.2)
    c.add_argument("--reps", type=_positive_int, default=16)
    c.add_argument("--objective", choices=("loss", "kl"), default="loss")
    c.add_argument("--kl-samples", type=_positive_int, default=4096)
    c.add_argument("--deltas-csv")
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate)

    m = sub.add_parser("menu", parents=[common], help="measure t^2 for every (layer, grid) pair")
    m.add_argument("--model", default="tiny")
    m.add_argument("--grids", nargs="+", required=True)
    m.add_argument("-g", type=_positive_int, default=64)
    m.add_argument("--scale-bits", type=int, choices=(16, 32, 64), default=16)
    m.add_argument("--out-csv", required=True)
    m.add_argument("--out-json", required=True)
    m.set_defaults(func=cmd_menu)

    a = sub.add_parser("allocate", parents=[common], help="solve the bitwidth allocation")
    a.add_argument("--menu-csv", required=True)
    a.add_argument("--menu-json", required=True)
    a.add_argument("--alphas", required=True)
    a.add_argument("--budget", type=float, nargs="+", required=True, help="b_max value(s) in bits/param")
    a.add_argument("--curve-csv")
    a.add_argument("--out")
    a.set_defaults(func=cmd_allocate)

    li = sub.add_parser("linearity", parents=[common], help="measured vs predicted loss sweep")
    li.add_argument("--model", default="tiny")
    li.add_argument("--t-levels", type=float, nargs="*",
                    default=[0.01, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5])
    li.add_argument("--reps", type=_positive_int, default=16)
    li.add_argument("--quant-seeds", type=_positive_int, default=16)
    li.add_argument("--alphas")
    li.add_argument("--out", required=True)
    li.set_defaults(func=cmd_linearity)
    return parser


def _seed_block(args) -> dict:
    return {"seed": args.seed, "seed_env": SEED_ENV, "threads": args.threads}


def _emit(args, payload: dict, stream=None) -> None:
    stream = sys.stdout if stream is None else stream
    text = payload.pop("text", "")
    payload["command"] = args.command if args.command != "grid" else "grid build"
    payload["seeds"] = _seed_block(args)
    if args.json:
        print(json.dumps(payload, sort_keys=True, default=float), file=stream)
    else:
        if text:
            print(text, file=stream)
        print(f"seed = {args.seed}", file=stream)


def _fail(args, message: str, code: int, extra: dict | None = None) -> int:
    if getattr(args, "json", False):
        print(json.dumps({"error": message, "exit_code": code, **(extra or {})}, sort_keys=True))
    print(f"higgsq: error: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        payload = args.func(args)
    except CliError as exc:
        return _fail(args, str(exc), exc.code)
    except InfeasibleBudget as exc:
        return _fail(args, str(exc), EXIT_INFEASIBLE, {"min_avg_bits": exc.min_avg_bits})
    except CorruptionError as exc:
        return _fail(args, f"{type(exc).__name__}: {exc}", EXIT_CORRUPT)
    except InvalidArgument as exc:
        parser.print_usage(sys.stderr)
        return _fail(args, str(exc), EXIT_ARGS)
    except (ConvergenceError, HiggsError) as exc:
        return _fail(args, str(exc), EXIT_OTHER)
    except OSError as exc:
        return _fail(args, str(exc), EXIT_IO)
    _emit(args, payload)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
