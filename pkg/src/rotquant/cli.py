"""``rotquant`` command-line entry point.

Exit codes: 0 success, 1 selftest failure, 2 format or missing-file error,
3 shape mismatch, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .quant import QuantConfig

log = logging.getLogger("rotquant")

EXIT_OK = 0
EXIT_SELFTEST = 1
EXIT_FORMAT = 2
EXIT_SHAPE = 3
EXIT_NUMERIC = 4

DEFAULT_SEED = 0
THREADS_ENV = "RQ_THREADS"

# resolved flags that describe where output goes, not what is computed
_NOT_IN_MANIFEST = {"out_dir", "config", "func", "verbose", "command"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def build_manifest(args, inputs: dict | None = None) -> dict:
    """Command, resolved configuration, seed, version and input digests."""
    from .tensor import RNG_ALGORITHM

    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_IN_MANIFEST}
    return {
        "command": args.command,
        "config": cfg,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "rng": RNG_ALGORITHM,
        "inputs": {name: {"file": Path(p).name, "sha256": sha256_file(p)} for name, p in (inputs or {}).items()},
    }


def _write_json(out: Path, name: str, obj) -> Path:
    from .tensor import atomic_write_text

    path = out / name
    atomic_write_text(path, dumps(obj))
    return path


def _check_finite(obj, where: str):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _check_finite(v, f"{where}[{i}]")
    elif isinstance(obj, float) and not math.isfinite(obj):
        raise CliError(EXIT_NUMERIC, f"non-finite value at {where}")


def _load(path: str, what: str) -> np.ndarray:
    from .tensor import NonFiniteError, TensorFileError, read_tensor

    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_FORMAT, f"{what} file not found: {p} (expected an RQT1 tensor file)")
    try:
        return read_tensor(p)
    except NonFiniteError as exc:
        raise CliError(EXIT_NUMERIC, f"{what}: {exc}") from exc
    except TensorFileError as exc:
        raise CliError(EXIT_FORMAT, f"{what}: {exc} (expected an RQT1 f64 row-major tensor)") from exc


def _parse_modes(text: str):
    from .pipeline import MODES

    modes = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise argparse.ArgumentTypeError(f"modes must be a comma list from {','.join(MODES)}; got {text!r}")
    return modes


def _parse_grid(text: str):
    try:
        grid = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be comma-separated integers, got {text!r}") from None
    if not grid or min(grid) < 2:
        raise argparse.ArgumentTypeError("grid sizes must be >= 2")
    return grid


# --- commands -----------------------------------------------------------


def cmd_quantize(args) -> int:
    from . import pipeline, quant
    from .tensor import ShapeError, write_tensor

    x = _load(args.activations, "activations")
    w = _load(args.weights, "weights")
    if x.shape[1] != w.shape[1]:
        raise CliError(
            EXIT_SHAPE,
            f"{args.weights}: weights have {w.shape[1]} input channels but {args.activations} "
            f"has width {x.shape[1]}; expected weights of shape (C_out, {x.shape[1]})",
        )
    if x.shape[1] < 4:
        raise CliError(EXIT_SHAPE, f"{args.activations}: width {x.shape[1]} too small; expected n >= 4")
    cfg = QuantConfig(bits=args.bits, symmetric=not args.asymmetric, granularity="per-row", clip_ratio=args.clip_ratio)
    try:
        report = pipeline.run_single_pass(
            x, w, cfg, seed=args.seed, modes=args.modes, art_passes=args.art_passes, profile=args.profile
        )
    except ShapeError as exc:
        raise CliError(EXIT_SHAPE, str(exc)) from exc
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        raise CliError(EXIT_NUMERIC, f"quantization failed: {exc}") from exc
    if not args.record_timings:
        report["timings_ns"] = None
    _check_finite(report, "report")

    out = Path(args.out_dir)
    inputs = {"activations": args.activations, "weights": args.weights}
    _write_json(out, "report.json", report)
    if args.save_tensors:
        for mode in args.modes:
            plan = pipeline.calibrate(x, args.seed, mode=mode, art_passes=args.art_passes, profile=args.profile)
            xr = pipeline.apply_to_activations(x, plan)
            wr = pipeline.apply_to_weights(w, plan)
            tag = mode.replace("+", "_")
            write_tensor(out / f"x_rot_{tag}.rqt", xr)
            write_tensor(out / f"x_quant_{tag}.rqt", quant.fake_quant(xr, cfg))
            write_tensor(out / f"w_quant_{tag}.rqt", quant.fake_quant(wr, cfg))
    _write_json(out, "manifest.json", build_manifest(args, inputs))
    for mode, res in report["modes"].items():
        log.info("%-8s product mse %.6g", mode, res["product_mse"])
    print(f"wrote {out / 'report.json'}")
    return EXIT_OK


def cmd_simulate_pathology(args) -> int:
    from . import pathology
    from .tensor import atomic_write_text

    try:
        cfg = pathology.SimConfig(
            n=args.n,
            tokens=args.tokens,
            c_out=args.c_out,
            steps=args.steps,
            lr=args.lr,
            lr_schedule=args.schedule,
            bits=args.bits,
            quantize_in_loss=not args.smooth,
            seed=args.seed,
            activations=args.activations,
        )
    except ValueError as exc:
        raise CliError(EXIT_FORMAT, f"invalid simulation config: {exc}") from exc
    try:
        trace = pathology.run_simulation(cfg)
    except np.linalg.LinAlgError as exc:
        raise CliError(EXIT_NUMERIC, f"simulation failed: {exc}") from exc
    summary = pathology.summarize(trace)
    summary["mode"] = "smooth" if args.smooth else "ste"
    _check_finite(summary, "summary")
    out = Path(args.out_dir)
    atomic_write_text(out / "trace.csv", pathology.trace_to_csv(trace))
    _write_json(out, "summary.json", summary)
    _write_json(out, "manifest.json", build_manifest(args))
    print(
        f"{summary['mode']}: decay_ratio={summary['decay_ratio']:.4g} "
        f"floor_ratio={summary['floor_ratio']:.4g} -> {out / 'trace.csv'}"
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    from . import bench
    from .tensor import atomic_write_text

    with bench.single_thread():
        rows = bench.run_bench(args.grid, args.tokens, args.repeats, args.seed, dense=not args.no_dense)
    if not rows:
        raise CliError(EXIT_FORMAT, "no benchmarkable sizes in grid")
    exps = bench.exponents(rows)
    out = Path(args.out_dir)
    atomic_write_text(out / "bench.csv", bench.rows_to_csv(rows))
    _write_json(out, "exponents.json", exps)
    _write_json(out, "manifest.json", build_manifest(args))
    for k, v in exps.items():
        print(f"{k} exponent {v:.3f}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    try:
        results = run_selftest(args.seed, inject=args.inject_failure)
    except KeyError as exc:
        raise CliError(EXIT_FORMAT, str(exc.args[0])) from exc
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.value:.3g} (tol {r.tol:g}, {r.seconds:.2f}s)")
    if failed:
        print(f"selftest failed: {', '.join(r.name for r in failed)}", file=sys.stderr)
        return EXIT_SELFTEST
    print(f"selftest ok: {len(results)} checks")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .pipeline import synthetic_activations, synthetic_weights
    from .tensor import make_rng, write_tensor

    rng = make_rng(args.seed)
    x = synthetic_activations(args.tokens, args.n, rng)
    w = synthetic_weights(args.c_out, args.n, rng)
    out = Path(args.out_dir)
    write_tensor(out / "activations.rqt", x)
    write_tensor(out / "weights.rqt", w)
    print(f"wrote {out / 'activations.rqt'} {x.shape} and {out / 'weights.rqt'} {w.shape}")
    return EXIT_OK


# --- parser -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rotquant", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--config", help="JSON file of flag defaults; explicit flags override it")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--seed", type=int, default=DEFAULT_SEED, help="RNG seed (default %(default)s)")
        sp.add_argument("--out-dir", default=out_default, help="output directory (default %(default)s)")

    q = sub.add_parser("quantize", help="calibrate rotations and compare modes on RQT1 inputs")
    q.add_argument("activations", help="RQT1 activations, shape (T, n)")
    q.add_argument("weights", help="RQT1 weights, shape (C_out, n)")
    common(q, "rq_out")
    q.add_argument("--bits", type=int, default=4)
    q.add_argument("--modes", type=_parse_modes, default=None, help="comma list; default all five")
    q.add_argument("--art-passes", type=int, default=1)
    q.add_argument("--profile", choices=("extreme", "median"), default="extreme")
    q.add_argument("--clip-ratio", type=float, default=1.0)
    q.add_argument("--asymmetric", action="store_true")
    q.add_argument("--save-tensors", action="store_true", help="also write rotated and quantized tensors")
    q.add_argument("--record-timings", action="store_true", help="include wall-clock timings (breaks byte determinism)")
    q.set_defaults(func=cmd_quantize)

    s = sub.add_parser("simulate-pathology", help="Cayley SGD on a quantized loss")
    common(s, "rq_pathology")
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--lr", type=float, default=20.0)
    s.add_argument("--schedule", choices=("constant", "linear-decay"), default="linear-decay")
    s.add_argument("--smooth", action="store_true", help="run the smooth control instead of STE")
    s.add_argument("--bits", type=int, default=4)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--tokens", type=int, default=64)
    s.add_argument("--c-out", type=int, default=16)
    s.add_argument("--activations", choices=("gaussian", "outliers"), default="gaussian")
    s.set_defaults(func=cmd_simulate_pathology)

    b = sub.add_parser("bench", help="fused vs dense rotation timing")
    common(b, "rq_bench")
    b.add_argument("--grid", type=_parse_grid, default=[1024, 4096, 16384])
    b.add_argument("--tokens", type=int, default=64)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--no-dense", action="store_true")
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("selftest", help="run small-n invariant checks")
    t.add_argument("--seed", type=int, default=DEFAULT_SEED)
    t.add_argument("--inject-failure", metavar="CHECK", default=None, help="force CHECK to fail (test hook)")
    t.set_defaults(func=cmd_selftest)

    y = sub.add_parser("synth", help="write synthetic activations and weights as RQT1")
    common(y, "rq_data")
    y.add_argument("--tokens", type=int, default=128)
    y.add_argument("--n", type=int, default=512)
    y.add_argument("--c-out", type=int, default=128)
    y.set_defaults(func=cmd_synth)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise CliError(EXIT_FORMAT, f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_FORMAT, f"{args.config}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise CliError(EXIT_FORMAT, f"{args.config}: expected a JSON object of flag defaults")
    known = set(vars(args))
    unknown = sorted(k for k in (key.replace("-", "_") for key in cfg) if k not in known)
    if unknown:
        raise CliError(EXIT_FORMAT, f"{args.config}: unknown keys {unknown} for '{args.command}'")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    return parser.parse_args(argv)


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError(EXIT_FORMAT, f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        if getattr(args, "modes", "unset") is None:
            from .pipeline import MODES

            args.modes = list(MODES)
        with _thread_limit():
            return args.func(args)
    except CliError as exc:
        print(f"rotquant: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
