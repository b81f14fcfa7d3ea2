"""Command-line front end.

Exit codes: 0 success, 1 malformed input, 2 numerical failure, 3 a check
(gradient error threshold, bias-bound violation, accuracy target) failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys

from . import harness
from .knn_demo import run_demo
from .ot_core import EotConfig, NumericalFailure, SoftTopkError
from .topk import soft_topk, sorted_soft_topk

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _solver_parent():
    # a fresh parent per subcommand: set_defaults mutates the shared actions
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("solver")
    g.add_argument("--max-iter", type=int, default=200)
    g.add_argument("--mode", choices=("plain", "log", "auto"), default="auto")
    g.add_argument("--tol", type=float, default=None, help="stop once the marginal residual is below this")
    g.add_argument("--normalize-cost", action=argparse.BooleanOptionalAction, default=True)
    g.add_argument("--eps-scaling", action=argparse.BooleanOptionalAction, default=True)
    g.add_argument("--seed", type=int, default=0)
    return p


def _config(args, epsilon=None, **overrides):
    return EotConfig(
        epsilon=args.epsilon if epsilon is None else epsilon,
        max_iter=args.max_iter,
        mode=args.mode,
        residual_tol=args.tol,
        normalize_cost=args.normalize_cost,
        eps_scaling=args.eps_scaling,
        **overrides,
    )


def _write_rows(rows, out):
    w = csv.writer(out, lineterminator="\n")
    w.writerow(harness.REPORT_HEADER)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _parse_score(v):
    if isinstance(v, str):
        v = float(v)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"score {v!r} is not a number")
    return float(v)


def read_records(stream, fmt, default_k):
    """Yield ``(line_no, id, scores, k)`` or ``(line_no, id, None, error)``."""
    if fmt == "csv":
        for line_no, row in enumerate(csv.reader(stream), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            rid = str(line_no)
            try:
                scores = [_parse_score(c.strip()) for c in row]
            except ValueError as exc:
                yield line_no, rid, None, str(exc)
                continue
            if default_k is None:
                yield line_no, rid, None, "csv input needs --k"
                continue
            yield line_no, rid, scores, default_k
        return

    for line_no, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("record must be a JSON object")
            rid = str(rec.get("id", line_no))
            raw = rec["scores"]
            if not isinstance(raw, list):
                raise ValueError("scores must be a list")
            scores = [_parse_score(v) for v in raw]
            k = rec.get("k", default_k)
            if k is None:
                raise ValueError("record has no k and --k was not given")
            if isinstance(k, bool) or not isinstance(k, int):
                raise ValueError(f"k must be an integer, got {k!r}")
        except (ValueError, KeyError, TypeError) as exc:
            msg = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
            yield line_no, str(line_no), None, msg
            continue
        yield line_no, rid, scores, k


def _json_number(v):
    return v if math.isfinite(v) else ("-inf" if v < 0 else "inf")


def cmd_topk(args, stdin=None, stdout=None, stderr=None):
    stdin = stdin or (open(args.input) if args.input else sys.stdin)
    stdout, stderr = stdout or sys.stdout, stderr or sys.stderr
    cfg = _config(args)
    op = sorted_soft_topk if args.sorted else soft_topk
    status = EXIT_OK
    seen = set()
    for line_no, rid, scores, k in read_records(stdin, args.format, args.k):
        if scores is None:
            print(json.dumps({"id": rid, "line": line_no, "error": k}), file=stderr)
            status = max(status, EXIT_INPUT)
            continue
        if rid in seen:
            print(json.dumps({"id": rid, "line": line_no, "error": "duplicate id"}), file=stderr)
            status = max(status, EXIT_INPUT)
            continue
        try:
            out = op(scores, k, cfg, largest=args.largest)
        except SoftTopkError as exc:
            print(json.dumps({"id": rid, "line": line_no, "error": str(exc)}), file=stderr)
            status = max(status, EXIT_INPUT)
            continue
        except NumericalFailure as exc:
            print(json.dumps({"id": rid, "line": line_no, "error": str(exc)}), file=stderr)
            status = max(status, EXIT_NUMERIC)
            continue
        seen.add(rid)
        record = {
            "id": rid,
            "scores": [_json_number(v) for v in scores],
            "k": k,
            "result": {"sorted": bool(args.sorted), "a": out.a.tolist()},
            "diagnostics": {
                "epsilon": cfg.epsilon,
                "iters_run": out.plan.iters_run,
                "marginal_residual": out.plan.marginal_residual,
                "mode_used": out.plan.mode_used,
            },
        }
        print(json.dumps(record), file=stdout)
    return status


def _default_threshold(eps):
    return 1e-3 if eps >= 1e-1 else 1e-2


def cmd_grad_check(args, stdout=None):
    stdout = stdout or sys.stdout
    cfg = _config(args, epsilon=args.epsilon[0])
    seeds = range(args.seed, args.seed + args.seeds)
    try:
        rows = harness.grad_check_rows(args.n, args.k, args.epsilon, seeds, cfg, sorted=args.sorted)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    status = EXIT_OK
    for n, k, eps, metric, value in rows:
        limit = args.threshold if args.threshold is not None else _default_threshold(eps)
        if metric == "max_rel_err" and value > limit:
            status = EXIT_CHECK
    _write_rows(rows, stdout)
    return status


def cmd_bias_scan(args, stdout=None):
    stdout = stdout or sys.stdout
    cfg = _config(args, epsilon=args.epsilon[0])
    rows = harness.bias_scan_rows(args.n, args.k, args.epsilon, args.trials, args.seed, cfg, min_gap=args.min_gap)
    _write_rows(rows, stdout)
    bad = any(metric == "violations" and value > 0 for *_, metric, value in rows)
    return EXIT_CHECK if bad else EXIT_OK


def cmd_bench(args, stdout=None):
    stdout = stdout or sys.stdout
    # fixed iteration budget so timings scale with n only
    cfg = EotConfig(
        epsilon=args.epsilon,
        max_iter=args.iters,
        mode=args.mode,
        normalize_cost=args.normalize_cost,
        eps_scaling=args.eps_scaling,
        stop_at_fixed_point=False,
    )
    rows = harness.bench_rows(args.n, args.k, cfg, args.repeats, args.seed, sorted=args.sorted)
    _write_rows(rows, stdout)
    return EXIT_OK


def cmd_knn_demo(args, stdout=None):
    stdout = stdout or sys.stdout
    res = run_demo(seed=args.seed, k=args.k, epsilon=args.epsilon, steps=args.steps, lr=args.lr, max_iter=args.max_iter)
    n = args.n_train
    rows = [
        (n, args.k, args.epsilon, "baseline_test_accuracy", res.baseline_test_accuracy),
        (n, args.k, args.epsilon, "train_accuracy", res.train_accuracy),
        (n, args.k, args.epsilon, "test_accuracy", res.test_accuracy),
    ]
    rows += [(n, args.k, args.epsilon, f"loss_step_{i}", v) for i, v in enumerate(res.losses)]
    _write_rows(rows, stdout)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="softtopk", description="SOFT top-k operators via entropic optimal transport")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("topk", parents=[_solver_parent()], help="apply (sorted) SOFT top-k to input records")
    p.add_argument("--input", help="input file (default stdin)")
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    p.add_argument("--k", type=int, default=None, help="k for records that do not carry one")
    p.add_argument("--epsilon", type=float, default=1e-2)
    p.add_argument("--sorted", action="store_true")
    p.add_argument("--largest", action="store_true", help="select the largest scores instead of the smallest")
    p.set_defaults(func=cmd_topk)

    p = sub.add_parser("grad-check", parents=[_solver_parent()], help="implicit gradients versus finite differences")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--epsilon", type=_float_list, default=[1e-1, 1e-2])
    p.add_argument("--seeds", type=int, default=20, help="number of seeded instances")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--sorted", action="store_true")
    p.set_defaults(func=cmd_grad_check, max_iter=20000, tol=1e-13)

    p = sub.add_parser("bias-scan", parents=[_solver_parent()], help="entropic bias versus its bound")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--epsilon", type=_float_list, default=[1e-3, 1e-2])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--min-gap", type=float, default=1e-3)
    p.set_defaults(func=cmd_bias_scan, max_iter=2000, tol=1e-10)

    p = sub.add_parser("bench", parents=[_solver_parent()], help="forward / backward timing")
    p.add_argument("--n", type=_int_list, default=[10_000, 100_000])
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--epsilon", type=float, default=1e-2)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--sorted", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("knn-demo", parents=[_solver_parent()], help="train a linear kNN feature map through SOFT top-k")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--epsilon", type=float, default=1e-2)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.5)
    p.set_defaults(func=cmd_knn_demo, n_train=60)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
