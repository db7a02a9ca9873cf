"""Command-line front end: generate, solve, bench, partition-stats."""

from __future__ import annotations

import argparse
import csv
import math
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import network
from .partition import build_variable_graph, make_partition, partition_stats
from .solver import SolverConfig, Status, assemble_blocks, solve
from .sparse import INNER_METHODS, frobenius_norm

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NOT_CONVERGED = 3
EXIT_FAILURE = 4

BENCH_HEADER = "n,N,m,K,seed,status,iters,time_ms,final_F,cut_fraction,beta_zero"
SUMMARY_HEADER = "n,N,best_K,best_time_ms,K1_time_ms,speedup"


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--b", type=float)
    g.add_argument("--c", type=float)
    g.add_argument("--eta", type=float)
    g.add_argument("--ell0", type=float)
    g.add_argument("--ell-min", type=float)
    g.add_argument("--max-iters", type=int)
    g.add_argument("--beta-zero", action="store_true", help="disable the right-hand-side correction")
    g.add_argument("--diagnostics", action="store_true")
    g.add_argument("--damping", choices=("residual", "algebraic"))
    g.add_argument("--inner-solver", choices=INNER_METHODS)


def _config(args, K: int) -> SolverConfig:
    over = {}
    for name in ("b", "c", "eta", "ell0", "ell_min", "max_iters", "damping", "inner_solver"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    try:
        return SolverConfig(K=K, beta_zero=args.beta_zero, diagnostics=args.diagnostics, **over)
    except ValueError as exc:
        raise UsageError(str(exc))


def _load(path) -> network.Problem:
    return network.read_problem(path)


def _fmt_fracs(fr) -> str:
    return "/".join(f"{100 * f:.1f}%" for f in fr)


# --------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    if args.n < 16:
        raise UsageError(f"--n must be at least 16, got {args.n}")
    prob = network.generate_problem(args.n, args.seed)
    network.write_problem(prob, args.out)
    deg = build_variable_graph(prob).average_degree()
    print(f"n={prob.n_points} m={prob.n_obs} average_degree={deg:.3f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# solve


def _partition(prob, K, seed):
    if K < 1:
        raise UsageError(f"--k must be at least 1, got {K}")
    if K > prob.n_points:
        raise UsageError(f"--k={K} exceeds the number of points {prob.n_points}")
    t0 = time.perf_counter()
    part = make_partition(prob, K, seed) if K > 1 else None
    return part, time.perf_counter() - t0


def cmd_solve(args) -> int:
    prob = _load(args.problem)
    cfg = _config(args, args.k)
    part, t_part = _partition(prob, args.k, args.seed)
    rep = solve(prob, part, cfg)
    if args.log:
        rep.write_log(args.log)
    print(f"status={rep.status.value} iterations={rep.iterations} final_F={rep.final_F!r}")
    print(f"within 1/2/3 sigma: {_fmt_fracs(rep.residual_percentiles)}")
    if part is not None:
        st = partition_stats(part, prob, rep.final_x)
        print(f"coupling part phi={st['phi']!r} cut_fraction={st['cut_fraction']:.4f}")
    print(f"solve_time={rep.wall_s:.3f}s partition_time={t_part:.3f}s")
    if rep.message:
        print(rep.message, file=sys.stderr)
    if rep.status is Status.CONVERGED:
        return EXIT_OK
    return EXIT_FAILURE if rep.status is Status.NUMERICAL_ERROR else EXIT_NOT_CONVERGED


# --------------------------------------------------------------------------
# partition-stats


def coupling_ratio(prob: network.Problem, part, x=None) -> float:
    """``||B||_F / ||J^T J||_F`` at ``x`` (initial guess by default)."""
    x = prob.initial_guess if x is None else x
    R, J = network.evaluate(prob, x)
    bs = assemble_blocks(J, R, part)
    full = frobenius_norm(bs.B) ** 2 + sum(frobenius_norm(h) ** 2 for h in bs.H_blocks)
    return frobenius_norm(bs.B) / math.sqrt(full) if full > 0 else 0.0


def cmd_partition_stats(args) -> int:
    prob = _load(args.problem)
    K = args.k
    if K < 1 or K > prob.n_points:
        raise UsageError(f"--k must lie in [1, {prob.n_points}], got {K}")
    part, t_part = _partition(prob, K, args.seed)
    if part is None:
        from .partition import classify_residuals
        part = classify_residuals(prob, np.zeros(prob.n_points, dtype=np.int64))
    st = partition_stats(part, prob, prob.initial_guess)
    print(f"K={K} n={prob.n_points} m={prob.n_obs} partition_time={t_part:.3f}s")
    print("subset,points,internal_residuals")
    for s in range(K):
        print(f"{s},{st['subset_sizes'][s]},{st['internal_counts'][s]}")
    print(f"coupling_residuals={st['coupling_count']}")
    print(f"cut_fraction={st['cut_fraction']:.6f}")
    print(f"balance={st['balance']:.4f}")
    print(f"M_hat={coupling_ratio(prob, part):.6g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# bench


@dataclass
class BenchRow:
    n: int
    N: int
    m: int
    K: int
    seed: int
    status: str
    iters: int
    time_ms: float
    final_F: float
    cut_fraction: float
    beta_zero: bool
    partition_ms: float = 0.0
    records: list = field(default_factory=list, repr=False)

    def csv_fields(self) -> list[str]:
        return [str(self.n), str(self.N), str(self.m), str(self.K), str(self.seed), self.status,
                str(self.iters), f"{self.time_ms:.3f}", repr(self.final_F),
                repr(self.cut_fraction), "1" if self.beta_zero else "0"]


def run_bench(sizes, ks, seeds, make_config=None, log_dir=None, echo=None) -> list[BenchRow]:
    """Solve every (size, seed, K) combination; failures are recorded, never raised."""
    make_config = make_config or (lambda K: SolverConfig(K=K))
    rows = []
    for n in sizes:
        for seed in seeds:
            try:
                prob = network.generate_problem(n, seed)
            except Exception as exc:  # noqa: BLE001 - recorded in the row
                for K in ks:
                    rows.append(BenchRow(n, 2 * n, 0, K, seed, f"GeneratorError: {exc}", 0,
                                         math.nan, math.nan, math.nan, False))
                continue
            for K in ks:
                cfg = make_config(K)
                row = BenchRow(n, prob.n_vars, prob.n_obs, K, seed, "", 0, math.nan, math.nan,
                               math.nan, cfg.beta_zero)
                try:
                    part, t_part = _partition(prob, K, seed)
                    row.partition_ms = 1e3 * t_part
                    row.cut_fraction = part.cut_fraction() if part is not None else 0.0
                    rep = solve(prob, part, cfg)
                    row.status = rep.status.value
                    row.iters = rep.iterations
                    row.time_ms = 1e3 * rep.wall_s
                    row.final_F = rep.final_F
                    row.records = rep.records
                    if log_dir is not None:
                        rep.write_log(Path(log_dir) / f"n{n}_K{K}_s{seed}{'_b0' if cfg.beta_zero else ''}.csv")
                except Exception as exc:  # noqa: BLE001 - recorded in the row
                    row.status = f"{type(exc).__name__}: {exc}"
                rows.append(row)
                if echo is not None:
                    echo(row)
    return rows


def write_bench_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_HEADER.split(","))
        for r in rows:
            w.writerow(r.csv_fields())


def summarize(rows) -> tuple[list[dict], float]:
    """Per-size best K by median converged time, plus the log-log slope of best time vs N."""
    out = []
    for n in sorted({r.n for r in rows}):
        by_k = {}
        for K in sorted({r.K for r in rows if r.n == n}):
            sel = [r for r in rows if r.n == n and r.K == K]
            if sel and all(r.status == Status.CONVERGED.value for r in sel):
                by_k[K] = statistics.median(r.time_ms for r in sel)
        if not by_k:
            continue
        best = min(by_k, key=lambda k: (by_k[k], k))
        k1 = by_k.get(1, math.nan)
        out.append({"n": n, "N": 2 * n, "best_K": best, "best_time_ms": by_k[best],
                    "K1_time_ms": k1, "speedup": k1 / by_k[best], "times": by_k})
    slope = loglog_slope([s["N"] for s in out], [s["best_time_ms"] for s in out])
    return out, slope


def loglog_slope(xs, ys) -> float:
    if len(xs) < 2:
        return math.nan
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def cmd_bench(args) -> int:
    if sorted(args.ks) != args.ks:
        raise UsageError("--ks must be sorted ascending")
    for K in args.ks:
        if K < 1:
            raise UsageError("--ks entries must be positive")
    for n in args.sizes:
        if n < 16:
            raise UsageError(f"sizes must be at least 16, got {n}")
        if max(args.ks) > n:
            raise UsageError(f"K={max(args.ks)} exceeds size {n}")
    _config(args, 1)
    if args.log_dir:
        Path(args.log_dir).mkdir(parents=True, exist_ok=True)

    def echo(r):
        print(f"n={r.n} K={r.K} seed={r.seed} {r.status} iters={r.iters} "
              f"time={r.time_ms:.0f}ms partition={r.partition_ms:.0f}ms", flush=True)

    rows = run_bench(args.sizes, args.ks, args.seeds, lambda K: _config(args, K), args.log_dir, echo)
    write_bench_csv(rows, args.out_csv)
    summary, slope = summarize(rows)
    print(SUMMARY_HEADER)
    for s in summary:
        print(f"{s['n']},{s['N']},{s['best_K']},{s['best_time_ms']:.3f},{s['K1_time_ms']:.3f},"
              f"{s['speedup']:.4f}")
    print(f"loglog_slope_best_K={slope:.4f}")
    if args.summary_csv:
        with open(args.summary_csv, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_HEADER.split(","))
            for s in summary:
                w.writerow([s["n"], s["N"], s["best_K"], repr(s["best_time_ms"]),
                            repr(s["K1_time_ms"]), repr(s["speedup"])])
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitlm", description="Split Levenberg-Marquardt for network adjustment")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic adjustment problem")
    g.add_argument("--n", type=int, required=True, help="number of points")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="partition and solve a problem file")
    s.add_argument("--problem", required=True)
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--seed", type=int, default=0, help="partitioner seed")
    s.add_argument("--log", help="iteration CSV output")
    _add_solver_flags(s)
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="sweep sizes, K and seeds on generated problems")
    b.add_argument("--sizes", type=_int_list, required=True, help="point counts, e.g. 500,2000")
    b.add_argument("--ks", type=_int_list, required=True)
    b.add_argument("--seeds", type=_int_list, default=[0])
    b.add_argument("--out-csv", required=True)
    b.add_argument("--summary-csv")
    b.add_argument("--log-dir", help="write one iteration log per run here")
    _add_solver_flags(b)
    b.set_defaults(func=cmd_bench)

    ps = sub.add_parser("partition-stats", help="partition quality at the initial guess")
    ps.add_argument("--problem", required=True)
    ps.add_argument("--k", type=int, required=True)
    ps.add_argument("--seed", type=int, default=0)
    ps.set_defaults(func=cmd_partition_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"splitlm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, network.ProblemFormatError) as exc:
        print(f"splitlm {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (np.linalg.LinAlgError, ValueError, network.GeneratorError) as exc:
        print(f"splitlm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
