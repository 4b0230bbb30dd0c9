"""``dyclot`` command line: summary, analyze, gradcheck, mpfc-check, train, eval.

Exit codes: 0 success, 1 a check failed, 2 bad usage or input.
"""

from __future__ import annotations

import argparse
import os
import sys
from fractions import Fraction

import numpy as np

from . import analysis
from .autodiff import GRAD_CHECK_LAYERS, grad_check
from .data import load_cifar_binary, synth_dataset
from .model import ModelGraph, TrainConfig, build_dyclotnet, evaluate, model_summary, train
from .weights import WeightsFormatError, load_weights, save_weights

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _frac(q: Fraction) -> str:
    return f"{q.numerator}/{q.denominator}"


def _default_seed() -> int:
    raw = os.environ.get("DYCLOT_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"DYCLOT_SEED must be an integer, got {raw!r}") from None


def cmd_summary(args) -> int:
    try:
        cfg = TrainConfig(alpha=args.alpha, p=args.p, r=args.r, num_classes=args.classes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = build_dyclotnet(cfg)
    summary = model_summary(model)
    print(f"DyClotNet alpha={args.alpha} p={args.p} r={args.r} classes={args.classes}")
    print(f"{'layer':<10} {'kind':<11} {'output':<16} {'params':>10} {'mult-adds':>14}")
    for row in summary.rows:
        shape = "x".join(str(s) for s in row.out_shape)
        print(f"{row.name:<10} {row.kind:<11} {shape:<16} {row.params:>10} {row.macs:>14}")
    print(f"total (graph walk)   params={summary.graph.total_params} mult-adds={summary.graph.total}")
    print(f"total (closed form)  params={summary.closed_form.total_params} mult-adds={summary.closed_form.total}")
    print(f"closed form, DCT module cost dropped: mult-adds={summary.closed_form_no_dct.total}")
    print(f"counters agree: {'yes' if summary.counters_agree else 'NO'}")
    return EXIT_OK if summary.counters_agree else EXIT_CHECK_FAILED


def _parse_range(text):
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"--sweep-p expects a:b, got {text!r}") from None
    if lo < 1 or hi < lo:
        raise UsageError(f"invalid --sweep-p range {text!r}")
    return range(lo, hi + 1)


def cmd_analyze(args) -> int:
    ps = _parse_range(args.sweep_p) if args.sweep_p else [args.p]
    try:
        rows = [analysis.sweep_row(args.m, args.n, args.df, args.dk, p, args.r) for p in ps]
        approx = [analysis.cost_ratio(args.m, args.n, args.dk, p, approximate=True) for p in ps]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for row, q in zip(rows, approx):
        print(f"M={row['M']} N={row['N']} Df={row['Df']} Dk={row['Dk']} p={row['p']} r={row['r']}")
        print(f"  C0={row['C0']}")
        print(f"  C1(paper)={row['C1_paper']}")
        print(f"  C1(exact)={row['C1_exact']}")
        print(f"  ratio C1/C0={row['ratio_num']}/{row['ratio_den']}")
        print(f"  approximate ratio={_frac(q)}")
    if args.csv:
        analysis.write_sweep_csv(rows, args.csv)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = _default_seed() if args.seed is None else args.seed
    ok = True
    for layer in GRAD_CHECK_LAYERS:
        rep = grad_check(layer, seed=seed, tol=args.tol)
        ok &= rep.passed
        print(f"{layer:<24} max_rel_err={rep.max_error:.3e} kinks_skipped={rep.kinks_skipped:<3} "
              f"{'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_mpfc_check(args) -> int:
    if min(args.s, args.t, args.p, args.trials) < 1:
        raise UsageError("--s, --t, --p and --trials must all be >= 1")
    seed = _default_seed() if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(args.trials):
        layer = analysis.MpfcLayer(rng.standard_normal((args.t, args.s, args.p)))
        x = rng.standard_normal(args.s)
        dev = np.abs(analysis.mpfc_forward(layer, x) - analysis.fc_forward(analysis.collapse_paths(layer), x))
        worst = max(worst, float(dev.max()))
    ok = worst <= args.tol
    print(f"s={args.s} t={args.t} p={args.p} trials={args.trials} max_deviation={worst:.3e} "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _load_data(spec, seed, n_per_class, num_classes):
    if spec == "synth":
        return synth_dataset(seed, n_per_class, num_classes)
    if spec.startswith("cifar:"):
        return load_cifar_binary(spec[len("cifar:"):])
    raise UsageError(f"--data must be 'synth' or 'cifar:PATH', got {spec!r}")


def cmd_train(args) -> int:
    if not os.path.isfile(args.config):
        raise UsageError(f"config file not found: {args.config}")
    try:
        cfg = TrainConfig.from_json(args.config)
        data = _load_data(args.data, cfg.seed, args.n_per_class, cfg.num_classes)
        if data.num_classes > cfg.num_classes:
            raise UsageError(f"data has {data.num_classes} classes, model only {cfg.num_classes}")
        model = build_dyclotnet(cfg)
        history = train(model, data, cfg, log=lambda e: print(
            f"epoch {e.epoch:>3}  loss {e.loss:.6f}  accuracy {e.accuracy:.6f}", flush=True))
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from None
    save_weights(model.params, args.out)
    print(f"final accuracy {history[-1].accuracy:.6f}; weights written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model = ModelGraph.from_params(load_weights(args.weights))
        seed = _default_seed() if args.seed is None else args.seed
        data = _load_data(args.data, seed, args.n_per_class, model.num_classes)
    except (ValueError, OSError, KeyError, WeightsFormatError) as exc:
        raise UsageError(f"{type(exc).__name__}: {exc}") from None
    accuracy, loss = evaluate(model, data)
    print(f"accuracy {accuracy:.6f}  loss {loss:.6f}  samples {len(data)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyclot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summary", help="per-layer parameter and multiply-add table")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--classes", type=int, default=10)
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("analyze", help="separable vs DCT bottleneck cost")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--df", type=int, required=True)
    p.add_argument("--dk", type=int, default=3)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--sweep-p", metavar="A:B")
    p.add_argument("--csv", metavar="PATH")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="analytic vs central-difference gradients")
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("mpfc-check", help="multi-path vs collapsed single-path equivalence")
    p.add_argument("--s", type=int, default=8)
    p.add_argument("--t", type=int, default=8)
    p.add_argument("--p", type=int, default=4)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_mpfc_check)

    p = sub.add_parser("train", help="train DyClotNet and write weights")
    p.add_argument("--config", required=True)
    p.add_argument("--data", default="synth")
    p.add_argument("--n-per-class", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of saved weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", default="synth")
    p.add_argument("--n-per-class", type=int, default=16)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dyclot {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
