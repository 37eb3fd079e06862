"""Command-line front end.

Exit codes: 0 ok, 2 configuration error, 3 numerical divergence,
4 partial sweep/compare failure, 5 convergence bound violated.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import __version__
from .config import KEYS, ConfigError, default_value, load_config_file, resolve
from .datasets import GENERATORS, write_csv
from .harness import (
    PolySchedule,
    compare_methods,
    sweep_qp,
    train,
    verify_diminishing_steps,
    verify_descent_bound,
    write_run,
)
from .model import QuadraticProblem
from .optim import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_PARTIAL, EXIT_BOUND = 0, 2, 3, 4, 5

SWEEP_GRID_QP = (0.95, 0.90, 0.85, 0.80, 0.75)


def _default_out() -> str:
    return os.environ.get("ZSHARP_OUT", "results")


def _err(msg: str) -> None:
    print(f"zsharp: error: {msg}", file=sys.stderr)


def _float_list(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p.strip()]


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", default=argparse.SUPPRESS,
                   help="key = value config file; flags override it")
    p.add_argument("--out", default=argparse.SUPPRESS,
                   help="output directory; falls back to $ZSHARP_OUT, then ./results")
    g = p.add_argument_group("run configuration (dot paths, same keys as the config file)")
    for key in KEYS:
        default = default_value(key)
        if isinstance(default, tuple):
            default = ",".join(map(str, default))
        g.add_argument(f"--{key}", dest=key, metavar="V", default=argparse.SUPPRESS,
                       help=f"(default: {default})")


def _run_config(args: argparse.Namespace):
    config = getattr(args, "config", None)
    file_values = load_config_file(config) if config else {}
    flags = {k: v for k, v in vars(args).items() if k in KEYS}
    return resolve(file_values, flags)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(getattr(args, "out", None) or _default_out())
    try:
        result = train(cfg, on_epoch=None if args.quiet else _print_epoch)
    except DivergenceError as exc:
        if exc.partial is not None:
            write_run(exc.partial, out)
        _err(str(exc))
        return EXIT_DIVERGED
    write_run(result, out)
    s = result.summary
    print(f"done: test_acc={s['final_test_acc']} train_loss={s['final_train_loss']} -> {out}")
    return EXIT_OK


def _print_epoch(m) -> None:
    kept = "" if m.kept_fraction is None else f" kept={m.kept_fraction:.4f}"
    sharp = "" if m.sharpness is None else f" sharpness={m.sharpness:.5f}"
    print(f"epoch {m.epoch:4d} loss={m.train_loss:.5f} test_acc={m.test_acc:.4f}{kept}{sharp}")


def cmd_sweep(args) -> int:
    qps = _float_list(args.qp)
    seeds = _int_list(args.seeds)
    if not qps:
        raise ConfigError("--qp must list at least one value")
    if not seeds:
        raise ConfigError("--seeds must list at least one value")
    for qp in qps:
        if not 0.0 <= qp < 1.0:
            raise ConfigError(f"--qp values must lie in [0, 1), got {qp}")
    cfg = _run_config(args).with_method("zsharp", qp=qps[0]).validate()
    out = Path(getattr(args, "out", None) or _default_out())
    table = sweep_qp(cfg, qps, seeds, jobs=args.jobs, out_dir=out)
    (out / "sweep.csv").write_text(table.to_csv(), encoding="utf-8")
    print(table.to_csv(), end="")
    if table.n_failed:
        for (qp, s), oc in table.outcomes.items():
            if not oc.ok:
                _err(f"qp={qp} seed={s}: {oc.error}")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_compare(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    seeds = _int_list(args.seeds)
    if not methods or any(m not in ("base", "sam", "zsharp") for m in methods):
        raise ConfigError("--methods must be a comma list drawn from base,sam,zsharp")
    if not seeds:
        raise ConfigError("--seeds must list at least one value")
    cfg = _run_config(args)
    out = Path(getattr(args, "out", None) or _default_out())
    table = compare_methods(cfg, methods, seeds, jobs=args.jobs, out_dir=out)
    (out / "compare.csv").write_text(table.to_csv(), encoding="utf-8")
    print(table.to_csv(), end="")
    return EXIT_PARTIAL if any(r.n_failed for r in table.rows) else EXIT_OK


def cmd_verify(args) -> int:
    if args.beta is not None:
        diag = [1.0, args.beta]
    else:
        diag = _float_list(args.diag)
    try:
        prob = QuadraticProblem.diagonal(diag)
    except ValueError as exc:
        raise ConfigError(f"--diag: {exc}") from None
    beta = prob.beta
    w0 = _float_list(args.w0) if args.w0 else [1.0] * prob.dim
    if len(w0) != prob.dim:
        raise ConfigError("--w0 length must match the problem dimension")
    etas = _float_list(args.eta) if args.eta else [1 / (4 * beta), 1 / (8 * beta), 1 / (16 * beta)]
    rs = _float_list(args.r) if args.r else [0.0, 0.25 / beta, 0.5 / beta]
    qps = _float_list(args.qp)
    failures = 0
    for eta in etas:
        for r in rs:
            for qp in qps:
                try:
                    rep = verify_descent_bound(prob, eta, r, args.steps, qp=qp, w0=w0)
                except ValueError as exc:
                    raise ConfigError(str(exc)) from None
                status = "ok  " if rep.satisfied else "FAIL"
                failures += not rep.satisfied
                print(f"[{status}] descent-bound beta={beta:g} eta={eta:.6g} r={r:.6g} qp={qp:g} T={args.steps}"
                      f" lhs={rep.lhs:.6g} rhs={rep.rhs:.6g}")
    try:
        cor = verify_diminishing_steps(prob, PolySchedule(args.eta0, 1.0), PolySchedule(args.r0, 1.0),
                                checkpoints=args.T or (100, 1000, 10000),
                                threshold=args.threshold if args.threshold is not None else 1e-4,
                                w0=w0)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for T, m in cor.checkpoints:
        print(f"         diminishing T={T} min_grad_sq={m:.6g}")
    ok = cor.monotone and (args.threshold is None or cor.converged)
    failures += not ok
    below = "below" if cor.final_min < cor.threshold else "not below"
    print(f"[{'ok  ' if ok else 'FAIL'}] diminishing monotone-min={'yes' if cor.monotone else 'no'}"
          f" final={cor.final_min:.6g} ({below} threshold {cor.threshold:g})")
    return EXIT_BOUND if failures else EXIT_OK


def cmd_gen_data(args) -> int:
    if args.n < 2:
        raise ConfigError("--n must be >= 2")
    if args.noise < 0:
        raise ConfigError(f"--noise must be >= 0, got {args.noise}")
    if not 0.0 <= args.label_noise <= 1.0:
        raise ConfigError(f"--label-noise must lie in [0, 1], got {args.label_noise}")
    kw = {"noise": args.noise, "seed": args.seed, "label_noise": args.label_noise}
    if args.generator != "two-moons":
        kw["n_classes"] = args.classes
    try:
        ds = GENERATORS[args.generator](args.n, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    if out.parent != Path("."):
        out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out)
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="zsharp", description="Z-score filtered SAM experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration", formatter_class=fmt)
    _add_run_flags(p)
    p.add_argument("--quiet", action="store_true", help="no per-epoch output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="ZSharp Q_p sweep with seed aggregation", formatter_class=fmt)
    _add_run_flags(p)
    p.add_argument("--qp", default=",".join(map(str, SWEEP_GRID_QP)), help="comma list of Q_p values")
    p.add_argument("--seeds", default="1,2,3", help="comma list of seeds")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="paired base/SAM/ZSharp comparison", formatter_class=fmt)
    _add_run_flags(p)
    p.add_argument("--methods", default="base,sam,zsharp", help="comma list of methods")
    p.add_argument("--seeds", default="1,2,3", help="comma list of seeds")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify", help="full-batch convergence checks on a quadratic", formatter_class=fmt)
    p.add_argument("--diag", default="1,10", help="diagonal of A")
    p.add_argument("--beta", type=float, default=None, help="shorthand for --diag 1,BETA")
    p.add_argument("--eta", default=None, help="comma list of step sizes (default: 1/(4b), 1/(8b), 1/(16b))")
    p.add_argument("--r", default=None, help="comma list of ascent radii (default: 0, 0.25/b, 0.5/b)")
    p.add_argument("--qp", default="0,0.5,0.95", help="comma list of Q_p values")
    p.add_argument("--steps", type=int, default=200, help="iterations per bound check")
    p.add_argument("--w0", default=None, help="starting point (default: all ones)")
    p.add_argument("--T", type=int, action="append", default=None,
                   help="checkpoint for the diminishing-step run, repeatable (default: 100, 1000, 10000)")
    p.add_argument("--eta0", type=float, default=0.025, help="diminishing step eta_t = eta0/(1+t)")
    p.add_argument("--r0", type=float, default=0.05, help="diminishing radius r_t = r0/(1+t)")
    p.add_argument("--threshold", type=float, default=None,
                   help="if given, the final min grad-norm^2 must fall below it (reported against 1e-4 otherwise)")
    p.add_argument("--out", default=None, help="unused; accepted for symmetry")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as CSV", formatter_class=fmt)
    p.add_argument("generator", choices=sorted(GENERATORS))
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=3, help="classes for blobs/spirals")
    p.add_argument("--label-noise", type=float, default=0.0, help="fraction of labels flipped")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
