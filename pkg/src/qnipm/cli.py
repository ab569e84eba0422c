"""Command line front end: ``qnipm solve`` and ``qnipm bench``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from qnipm import bench, ipm
from qnipm.ipm import Mode, SolverOptions
from qnipm.problem import (InfeasibleBoundsError, QpsParseError, read_qps, recover_solution,
                           to_standard_form)

log = logging.getLogger("qnipm")

EXIT_OK = 0
EXIT_SOLVE_ERROR = 1
EXIT_INPUT_ERROR = 2


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
  p.add_argument("--update", choices=["u1", "u2", "u3"], default="u2")
  p.add_argument("--lmax", type=int, default=5, help="quasi-Newton memory bound")
  p.add_argument("--eps-c", type=float, default=0.99)
  p.add_argument("--eps-alpha", type=float, default=None,
                 help="use the step-size rule with this threshold instead of the centrality rule")
  p.add_argument("--max-iter", type=int, default=200)
  p.add_argument("--tol-opt", type=float, default=1e-10)
  p.add_argument("--tol-p", type=float, default=1e-8)
  p.add_argument("--tol-d", type=float, default=None)
  p.add_argument("--gentle-sigma", action="store_true")
  p.add_argument("--qn-min-step", type=float, default=0.0,
                 help="refactor instead of taking a quasi-Newton step shorter than this")
  p.add_argument("--start", choices=["mehrotra", "beta"], default="mehrotra")
  p.add_argument("--backend", choices=["dense", "sparse"], default="dense")


def build_parser() -> argparse.ArgumentParser:
  parser = argparse.ArgumentParser(prog="qnipm", description=__doc__)
  parser.add_argument("-v", "--verbose", action="store_true")
  sub = parser.add_subparsers(dest="command", required=True)

  s = sub.add_parser("solve", help="solve one QPS/MPS file")
  s.add_argument("file")
  s.add_argument("--mode", choices=[m.value for m in Mode], default="qn")
  _add_solver_flags(s)
  s.add_argument("--trace", help="write the JSON run report here")
  s.add_argument("--quiet", action="store_true", help="print only the final status line")

  b = sub.add_parser("bench", help="run a suite over several modes")
  b.add_argument("paths", nargs="*", help="QPS/MPS files or directories")
  b.add_argument("--generate", help="seed,count,n,m for a generated suite")
  b.add_argument("--convexity", choices=["psd", "pd", "lp"], default="psd")
  b.add_argument("--modes", default="newton,qn")
  b.add_argument("--metric", choices=["factorizations", "time", "backsolves", "iterations"],
                 default="factorizations")
  b.add_argument("--csv", help="per-row results")
  b.add_argument("--json", help="full report with metadata")
  b.add_argument("--profile", help="performance-profile points (CSV)")
  b.add_argument("--relax", type=float, default=None,
                 help="rerun failed rows with tolerances multiplied by this factor")
  b.add_argument("--workers", type=int, default=1)
  _add_solver_flags(b)
  return parser


def _options(args, mode: str) -> SolverOptions:
  return SolverOptions(
      mode=mode, update_kind=args.update, ell_max=args.lmax, eps_c=args.eps_c,
      eps_alpha=args.eps_alpha, tol_opt=args.tol_opt, tol_p=args.tol_p, tol_d=args.tol_d,
      max_iter=args.max_iter, gentle_sigma=args.gentle_sigma, qn_min_step=args.qn_min_step,
      start=args.start, backend=args.backend, verbose=args.verbose)


def _cmd_solve(args) -> int:
  raw = read_qps(args.file)
  qp, rec = to_standard_form(raw)
  report = ipm.solve(qp, _options(args, args.mode))
  sol = recover_solution(rec, raw, report.x, report.lam)
  if not args.quiet:
    print(report.summary())
  print(f"{raw.name or Path(args.file).stem}: {report.status.value} "
        f"objective={sol.objective:.12g} factorizations={report.factorizations}")
  if args.trace:
    out = report.to_dict(include_point=False)
    out["problem"] = raw.name
    out["solution"] = {"x": sol.x.tolist(), "lam": sol.lam.tolist(), "z": sol.z.tolist(),
                       "objective": sol.objective}
    Path(args.trace).write_text(json.dumps(out, indent=2))
  return EXIT_OK


def _cmd_bench(args) -> int:
  modes = [m.strip() for m in args.modes.split(",") if m.strip()]
  for m in modes:
    Mode(m)
  problems = bench.load_problems(args.paths)
  seed = None
  if args.generate:
    try:
      seed, count, n, m = (int(t) for t in args.generate.split(","))
    except ValueError:
      raise ValueError("--generate expects seed,count,n,m") from None
    problems += bench.generated_suite(seed, count, n, m, args.convexity)
  report = bench.run_suite(problems, modes, _options(args, modes[0] if modes else "qn"),
                           relax=args.relax, workers=args.workers, seed=seed)
  if args.csv:
    Path(args.csv).write_text(report.to_csv())
  if args.json:
    Path(args.json).write_text(report.to_json())
  if report.rows:
    curves = bench.perf_profile(report, args.metric)
    if args.profile:
      Path(args.profile).write_text(bench.profile_csv(curves))
    for mode, curve in curves.items():
      print(f"{mode:10s} rho(1)={curve(1.0):.3f} robustness={curve.robustness:.3f}")
  solved = sum(r.solved for r in report.rows)
  print(f"{len(report.rows)} rows, {solved} solved")
  crashed = [r for r in report.rows if r.status == "error"]
  for r in crashed:
    print(f"error: {r.problem}/{r.mode}: {r.error}", file=sys.stderr)
  return EXIT_SOLVE_ERROR if crashed else EXIT_OK


def main(argv: list[str] | None = None) -> int:
  args = build_parser().parse_args(argv)
  logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                      format="%(message)s")
  try:
    if args.command == "solve":
      return _cmd_solve(args)
    return _cmd_bench(args)
  except (QpsParseError, InfeasibleBoundsError, OSError, ValueError) as e:
    print(f"error: {e}", file=sys.stderr)
    return EXIT_INPUT_ERROR


if __name__ == "__main__":
  sys.exit(main())
