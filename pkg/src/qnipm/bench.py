"""Suite runner, random instance generator and performance profiles."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from qnipm import ipm
from qnipm.ipm import Mode, SolverOptions
from qnipm.kernel import IterateState, residuals
from qnipm.problem import (QuadraticProgram, RawProblem, read_qps, recover_solution,
                           to_standard_form)

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("problem", "mode", "status", "solved", "relaxed", "iterations",
               "factorizations", "backsolves", "qn_steps", "newton_steps",
               "seconds", "objective", "primal_inf", "dual_inf", "opt_gap")

_MAX_REDRAWS = 10


class GeneratorError(RuntimeError):
  pass


@dataclasses.dataclass
class GeneratedProblem:
  qp: QuadraticProgram
  x_feasible: np.ndarray


def generate_qp(seed: int, n: int, m: int, density: float = 0.3,
                convexity: str = "psd") -> GeneratedProblem:
  """Random convex QP with a strictly feasible primal point and bounded objective.

  ``convexity`` is ``"lp"`` (Q = 0), ``"psd"`` (Q = LL' with rank n//2) or
  ``"pd"`` (LL' + 0.1 I). ``b = A x0`` for a positive ``x0`` and
  ``c = A'lam0 + z0 - Q x1`` with ``z0 > 0``, so the dual is strictly feasible
  as well and an optimum exists.
  """
  if not n > m >= 0:
    raise ValueError("need n > m >= 0")
  if convexity not in ("lp", "psd", "pd"):
    raise ValueError(f"unknown convexity {convexity!r}")
  rng = np.random.default_rng(seed)
  for _ in range(_MAX_REDRAWS):
    A = _sparse_rows(rng, m, n, density)
    if m == 0 or _full_row_rank(A):
      break
  else:
    raise GeneratorError(f"no full-row-rank A after {_MAX_REDRAWS} draws")

  if convexity == "lp":
    Q = sp.csr_matrix((n, n))
  else:
    r = max(1, n // 2)
    L = sp.random(n, r, density=min(1.0, 2 * density), random_state=rng,
                  data_rvs=rng.standard_normal)
    Q = L @ L.T
    if convexity == "pd":
      Q = Q + 0.1 * sp.identity(n)
    Q = sp.csr_matrix((Q + Q.T) / 2)

  x0 = rng.uniform(0.5, 1.5, n)
  b = A @ x0
  # Dual slack: mostly small so that many bounds are active at the optimum.
  z0 = np.where(rng.random(n) < 0.5, rng.uniform(0.5, 2.0, n), rng.uniform(1e-3, 1e-2, n))
  lam0 = rng.standard_normal(m)
  x1 = rng.uniform(0.0, 1.0, n)
  c = A.T @ lam0 + z0 - Q @ x1
  name = f"gen{seed}_{convexity}_{n}x{m}"
  return GeneratedProblem(QuadraticProgram(Q=Q, A=A, b=b, c=c, name=name), x0)


def _sparse_rows(rng, m: int, n: int, density: float) -> sp.csr_matrix:
  if m == 0:
    return sp.csr_matrix((0, n))
  A = sp.random(m, n, density=density, random_state=rng,
                data_rvs=rng.standard_normal, format="lil")
  for i in range(m):
    # every row gets at least two entries
    for j in rng.choice(n, size=2, replace=False):
      if A[i, j] == 0:
        A[i, j] = rng.standard_normal()
  return sp.csr_matrix(A)


def _full_row_rank(A: sp.csr_matrix) -> bool:
  G = (A @ A.T).toarray()
  try:
    Lc = np.linalg.cholesky(G)
  except np.linalg.LinAlgError:
    return False
  d = np.diag(Lc) ** 2
  return bool(d.min() > 1e-10 * d.max())


@dataclasses.dataclass
class SuiteRow:
  problem: str
  mode: str
  status: str
  solved: bool
  relaxed: bool
  iterations: int
  factorizations: int
  backsolves: int
  qn_steps: int
  newton_steps: int
  seconds: float
  objective: float
  primal_inf: float
  dual_inf: float
  opt_gap: float
  error: str = ""


@dataclasses.dataclass
class SuiteReport:
  rows: list[SuiteRow]
  metadata: dict[str, Any]

  def modes(self) -> list[str]:
    return list(dict.fromkeys(r.mode for r in self.rows))

  def problems(self) -> list[str]:
    return list(dict.fromkeys(r.problem for r in self.rows))

  def row(self, problem: str, mode: str) -> SuiteRow:
    for r in self.rows:
      if r.problem == problem and r.mode == mode:
        return r
    raise KeyError((problem, mode))

  def to_csv(self) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(CSV_COLUMNS)
    for r in self.rows:
      writer.writerow([getattr(r, col) for col in CSV_COLUMNS])
    return buf.getvalue()

  def to_json(self) -> str:
    return json.dumps({"metadata": self.metadata,
                       "rows": [dataclasses.asdict(r) for r in self.rows]}, indent=2)


def verify_solution(qp: QuadraticProgram, report: ipm.SolverReport,
                    opts: SolverOptions) -> bool:
  """Re-checks the stopping test from the returned point alone."""
  it = IterateState(report.x, report.lam, report.z)
  if not (np.all(np.isfinite(it.x)) and np.all(np.isfinite(it.z))
          and np.all(np.isfinite(it.lam))):
    return False
  tol_p, tol_d, tol_opt = ipm.tolerances(qp, opts)
  p, d, g = residuals(qp, it)
  return p <= tol_p and d <= tol_d and g <= tol_opt


def _options_for(mode: str, base: SolverOptions) -> SolverOptions:
  return dataclasses.replace(base, mode=Mode(mode), verbose=False)


def _run_one(args) -> SuiteRow:
  name, qp, mode, base, relax = args
  opts = _options_for(mode, base)
  row = _solve_row(name, qp, mode, opts, relaxed=False)
  if not row.solved and relax:
    row = _solve_row(name, qp, mode, opts.relaxed(relax), relaxed=True)
  return row


def _solve_row(name, qp, mode, opts, relaxed) -> SuiteRow:
  try:
    rep = ipm.solve(qp, opts)
  except Exception as e:  # noqa: BLE001 - one bad problem never aborts a suite
    logger.exception("solve failed for %s/%s", name, mode)
    return SuiteRow(name, mode, "error", False, relaxed, 0, 0, 0, 0, 0, 0.0,
                    float("nan"), float("nan"), float("nan"), float("nan"), error=repr(e))
  p, d, g = rep.residuals
  return SuiteRow(
      problem=name, mode=mode, status=rep.status.value,
      solved=verify_solution(qp, rep, opts), relaxed=relaxed,
      iterations=rep.iterations, factorizations=rep.factorizations,
      backsolves=rep.backsolves, qn_steps=rep.qn_steps,
      newton_steps=rep.newton_steps, seconds=rep.seconds,
      objective=rep.objective, primal_inf=p, dual_inf=d, opt_gap=g)


def load_problems(paths: Iterable[str | Path]) -> list[tuple[str, QuadraticProgram]]:
  """Reads QPS/MPS files (or every *.mps/*.qps in a directory) in standard form."""
  out = []
  for path in paths:
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".mps", ".qps")) \
        if path.is_dir() else [path]
    for f in files:
      raw = read_qps(f)
      qp, _ = to_standard_form(raw)
      out.append((raw.name or f.stem, qp))
  return out


def generated_suite(seed: int, count: int, n: int, m: int,
                    convexity: str = "psd") -> list[tuple[str, QuadraticProgram]]:
  """``count`` instances with sizes drawn in ``[n//2, n]`` x ``[m//2, m]``."""
  rng = np.random.default_rng(seed)
  out = []
  for i in range(count):
    nn = int(rng.integers(max(2, n // 2), n + 1))
    mm = int(rng.integers(m // 2, m + 1))
    mm = min(mm, nn - 1)
    g = generate_qp(seed * 1000 + i, nn, mm, convexity=convexity)
    out.append((g.qp.name, g.qp))
  return out


def run_suite(problems: Sequence[tuple[str, QuadraticProgram]], modes: Sequence[str],
              opts: SolverOptions | None = None, *, relax: float | None = None,
              workers: int = 1, seed: int | None = None) -> SuiteReport:
  """Solves every problem under every mode with identical tolerances.

  ``relax`` reruns only the rows that failed, with all tolerances multiplied
  by it. Failures are recorded as rows; nothing aborts the suite.
  """
  base = opts or SolverOptions()
  jobs = [(name, qp, mode, base, relax) for name, qp in problems for mode in modes]
  if workers > 1 and len(jobs) > 1:
    with ProcessPoolExecutor(max_workers=workers) as pool:
      rows = list(pool.map(_run_one, jobs))
  else:
    rows = [_run_one(j) for j in jobs]
  metadata = {
      "seed": seed,
      "modes": list(modes),
      "relax": relax,
      "tolerances": {"tol_opt": base.tol_opt, "tol_p": base.tol_p, "tol_d": base.tol_d},
      "options": base.to_dict(),
      "machine": f"{platform.system()} {platform.machine()} python {platform.python_version()}",
      "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
  }
  return SuiteReport(rows, metadata)


@dataclasses.dataclass
class ProfileCurve:
  """Step function: fraction of problems with ratio <= tau, for tau >= 1."""

  mode: str
  ratios: np.ndarray  # per problem, inf when unsolved

  @property
  def breakpoints(self) -> np.ndarray:
    finite = np.sort(self.ratios[np.isfinite(self.ratios)])
    return np.unique(np.concatenate([[1.0], finite]))

  def __call__(self, tau: float) -> float:
    return float(np.mean(self.ratios <= tau)) if self.ratios.size else 0.0

  @property
  def robustness(self) -> float:
    return float(np.mean(np.isfinite(self.ratios))) if self.ratios.size else 0.0

  def points(self) -> list[tuple[float, float]]:
    return [(float(t), self(t)) for t in self.breakpoints]


def perf_profile(report: SuiteReport, metric: str = "factorizations") -> dict[str, ProfileCurve]:
  """Performance-profile curves per mode.

  ratio = metric / (best metric among modes that solved the problem);
  unsolved entries get +inf.
  """
  if not report.rows:
    raise ValueError("empty report")
  if metric not in ("factorizations", "time", "seconds", "backsolves", "iterations"):
    raise ValueError(f"unknown metric {metric!r}")
  attr = "seconds" if metric == "time" else metric
  modes, problems = report.modes(), report.problems()
  values = np.full((len(problems), len(modes)), np.inf)
  for i, p in enumerate(problems):
    for j, mo in enumerate(modes):
      r = report.row(p, mo)
      if r.solved:
        values[i, j] = max(float(getattr(r, attr)), 1e-12)
  best = values.min(axis=1, keepdims=True)
  with np.errstate(invalid="ignore"):
    ratios = np.where(np.isfinite(values), values / best, np.inf)
  return {mo: ProfileCurve(mo, ratios[:, j]) for j, mo in enumerate(modes)}


def profile_csv(curves: dict[str, ProfileCurve]) -> str:
  buf = io.StringIO()
  w = csv.writer(buf)
  w.writerow(("mode", "tau", "fraction"))
  for mode, curve in curves.items():
    for tau, frac in curve.points():
      w.writerow((mode, tau, frac))
  return buf.getvalue()
