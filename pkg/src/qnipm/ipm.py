"""Quasi-Newton primal-dual interior point method.

Each iteration computes a Mehrotra predictor-corrector direction with the
current :class:`~qnipm.quasinewton.QnOperator`. After the step the pair
``(s, y)`` is either appended to the operator (next step is quasi-Newton,
no factorization) or the operator is reset (next step refactors and is a
Newton step).
"""

from __future__ import annotations

import dataclasses
import enum
import logging
import time
from typing import Any

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg

from qnipm import linalg
from qnipm.kernel import IterateState, Regularization, eval_F_reg, residuals
from qnipm.linalg import FactorizationBreakdown, KktFactorization
from qnipm.problem import QuadraticProgram
from qnipm.quasinewton import QnOperator, UpdateKind

logger = logging.getLogger(__name__)

_SIGMA_MIN = 1e-4
_SIGMA_MAX = 1.0 - 1e-4
_GENTLE_SIGMA = 0.9
_STEP_BOOST = 0.1
_CORRECTOR_GAIN = 0.1
_TARGET_LO, _TARGET_HI = 0.1, 10.0
_REG_ESCALATION = 100.0
_REG_RETRIES = 3
_DIVERGENCE = 1e15
_COLLAPSE = 1e-4
_COLLAPSE_MIN_ITER = 5

_HEADER = ("| iter | step | ell |        mu |  alpha_p |  alpha_d |     pinf |"
           "     dinf |      gap | corr | decision |")


class Mode(enum.Enum):
  NEWTON = "newton"
  NEWTON_MC = "newton-mc"
  QN = "qn"
  QN_MC = "qn-mc"

  @property
  def quasi_newton(self) -> bool:
    return self in (Mode.QN, Mode.QN_MC)


class Status(enum.Enum):
  OPTIMAL = "optimal"
  LACK_OF_IMPROVEMENT = "lack_of_improvement"
  ITERATION_LIMIT = "iteration_limit"
  INFEASIBLE_SUSPECTED = "infeasible_suspected"
  FAILURE = "failure"

  @property
  def converged(self) -> bool:
    return self in (Status.OPTIMAL, Status.LACK_OF_IMPROVEMENT)


class Decision(enum.Enum):
  STORE = "store"
  RESET = "reset"


@dataclasses.dataclass
class SolverOptions:
  """Solver settings.

  ``tol_d`` of None means 1e-8 for LPs and 1e-6 for QPs. ``eps_alpha`` set
  switches the store/reset rule from the centrality test to the step-size
  test; the two are never combined. Modes ``newton``/``newton-mc`` force
  ``ell_max = 0``.
  """

  mode: Mode | str = Mode.QN
  update_kind: UpdateKind | str = UpdateKind.U2
  ell_max: int = 5
  eps_c: float = 0.99
  eps_alpha: float | None = None
  tol_opt: float = 1e-10
  tol_p: float = 1e-8
  tol_d: float | None = None
  max_iter: int = 200
  tau: float = 0.9995
  max_correctors: int = 3
  reg_base: float = 1e-8
  gentle_sigma: bool = False
  second_order: bool = True
  stall_window: int = 5
  stall_factor: float = 0.999
  qn_min_step: float = 0.0
  start: str = "mehrotra"
  backend: str = "dense"
  tol_scale: float = 1.0
  verbose: bool = False

  def __post_init__(self):
    self.mode = Mode(self.mode) if not isinstance(self.mode, Mode) else self.mode
    self.update_kind = UpdateKind.parse(self.update_kind)
    if not 0 < self.eps_c < 1:
      raise ValueError("eps_c must lie in (0, 1)")
    if not 0 < self.tau < 1:
      raise ValueError("tau must lie in (0, 1)")
    if self.ell_max < 0:
      raise ValueError("ell_max must be nonnegative")
    if self.max_correctors < 0 or self.max_iter < 0:
      raise ValueError("counts must be nonnegative")
    if self.start not in _STARTS:
      raise ValueError(f"start must be one of {sorted(_STARTS)}")
    if self.qn_min_step < 0:
      raise ValueError("qn_min_step must be nonnegative")

  @property
  def effective_ell_max(self) -> int:
    return self.ell_max if self.mode.quasi_newton else 0

  def dual_tol(self, qp: QuadraticProgram) -> float:
    if self.tol_d is not None:
      return self.tol_d
    return 1e-8 if qp.is_lp else 1e-6

  def relaxed(self, factor: float) -> "SolverOptions":
    """Copy with every stopping tolerance multiplied by ``factor``."""
    return dataclasses.replace(self, tol_scale=self.tol_scale * factor)

  def to_dict(self) -> dict[str, Any]:
    out = dataclasses.asdict(self)
    out["mode"] = self.mode.value
    out["update_kind"] = self.update_kind.value
    return out


def tolerances(qp: QuadraticProgram, opts: SolverOptions) -> tuple[float, float, float]:
  """(tol_p, tol_d, tol_opt) in effect for ``qp``."""
  f = opts.tol_scale
  return opts.tol_p * f, opts.dual_tol(qp) * f, opts.tol_opt * f


@dataclasses.dataclass
class TraceRow:
  k: int
  step: str
  ell: int
  mu: float
  alpha_p: float
  alpha_d: float
  sigma: float
  correctors: int
  primal_inf: float
  dual_inf: float
  opt_gap: float
  xz_before: float
  xz_after: float
  min_x: float
  min_z: float
  max_blocking: float
  decision: str = ""
  inertia: tuple[int, int, int] | None = None

  def format(self) -> str:
    return (f"| {self.k:4d} | {self.step:>4s} | {self.ell:3d} | {self.mu:9.3e} |"
            f" {self.alpha_p:8.2e} | {self.alpha_d:8.2e} | {self.primal_inf:8.2e} |"
            f" {self.dual_inf:8.2e} | {self.opt_gap:8.2e} | {self.correctors:4d} |"
            f" {self.decision:>8s} |")


@dataclasses.dataclass
class SolverReport:
  status: Status
  iterations: int
  factorizations: int
  backsolves: int
  qn_steps: int
  newton_steps: int
  objective: float
  residuals: tuple[float, float, float]
  x: np.ndarray
  lam: np.ndarray
  z: np.ndarray
  trace: list[TraceRow]
  options: SolverOptions
  seconds: float = 0.0
  factorization_attempts: int = 0
  inertias: list[tuple[int, int, int]] = dataclasses.field(default_factory=list)
  message: str = ""

  def to_dict(self, include_point: bool = True) -> dict[str, Any]:
    out = {
        "status": self.status.value,
        "iterations": self.iterations,
        "factorizations": self.factorizations,
        "factorization_attempts": self.factorization_attempts,
        "backsolves": self.backsolves,
        "qn_steps": self.qn_steps,
        "newton_steps": self.newton_steps,
        "objective": self.objective,
        "residuals": {"primal": self.residuals[0], "dual": self.residuals[1],
                      "gap": self.residuals[2]},
        "seconds": self.seconds,
        "message": self.message,
        "options": self.options.to_dict(),
        "trace": [dataclasses.asdict(r) for r in self.trace],
    }
    if include_point:
      out["x"] = self.x.tolist()
      out["lam"] = self.lam.tolist()
      out["z"] = self.z.tolist()
    return out

  def summary(self) -> str:
    lines = [_HEADER, "|" + "-" * (len(_HEADER) - 2) + "|"]
    lines += [r.format() for r in self.trace]
    p, d, g = self.residuals
    lines.append(
        f"status={self.status.value} iterations={self.iterations} "
        f"factorizations={self.factorizations} backsolves={self.backsolves} "
        f"newton={self.newton_steps} qn={self.qn_steps} objective={self.objective:.10g} "
        f"pinf={p:.2e} dinf={d:.2e} gap={g:.2e} time={self.seconds:.3f}s")
    return "\n".join(lines)


def starting_point(qp: QuadraticProgram) -> IterateState:
  """``x = z = beta e``, ``lam = 0`` with ``beta = max(1, sqrt(|c|_inf + |b|_inf + 1))``."""
  cmax = float(np.max(np.abs(qp.c))) if qp.n else 0.0
  bmax = float(np.max(np.abs(qp.b))) if qp.m else 0.0
  beta = max(1.0, np.sqrt(cmax + bmax + 1.0))
  return IterateState(np.full(qp.n, beta), np.zeros(qp.m), np.full(qp.n, beta))


def mehrotra_starting_point(qp: QuadraticProgram) -> IterateState:
  """Least-squares start shifted into the interior.

  ``x`` is the least-norm solution of ``Ax = b`` and ``(lam, z)`` the
  least-squares dual for ``c + Qx``; both are then shifted so that ``x, z > 0``
  and the complementarity products are balanced. Falls back to
  :func:`starting_point` if the shifted point is degenerate.
  """
  n, m = qp.n, qp.m
  A = qp.A
  if m:
    G = sp.csc_matrix(A @ A.T) + 1e-12 * _reg_scale(qp) ** 2 * sp.identity(m, format="csc")
    try:
      lu = scipy.sparse.linalg.splu(G)
    except RuntimeError:
      return starting_point(qp)
    x = A.T @ lu.solve(qp.b)
  else:
    x = np.zeros(n)
  g = qp.c + qp.Q @ x
  lam = lu.solve(A @ g) if m else np.zeros(0)
  z = g - A.T @ lam
  if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam)) and np.all(np.isfinite(z))):
    return starting_point(qp)
  x = x + max(-1.5 * float(np.min(x)), 0.0)
  z = z + max(-1.5 * float(np.min(z)), 0.0)
  xz = float(x @ z)
  if not xz > 0:
    return starting_point(qp)
  x = x + 0.5 * xz / float(np.sum(z))
  z = z + 0.5 * xz / float(np.sum(x))
  it = IterateState(x, lam, z)
  return it if it.is_interior() else starting_point(qp)


_STARTS = {"mehrotra": mehrotra_starting_point, "beta": starting_point}


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
  neg = dv < 0
  if not np.any(neg):
    return np.inf
  return float(np.min(-v[neg] / dv[neg]))


def step_sizes(it: IterateState, direction: np.ndarray,
               tau: float) -> tuple[float, float]:
  """Fraction-to-boundary step lengths for ``(x)`` and ``(lam, z)``."""
  n, m = it.n, it.lam.shape[0]
  dx, dz = direction[:n], direction[n + m:]
  return (min(1.0, tau * _max_step(it.x, dx)), min(1.0, tau * _max_step(it.z, dz)))


def blocking_report(it: IterateState, direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
  """Component-wise ``|dx_i|/x_i`` and ``|dz_i|/z_i``."""
  n, m = it.n, it.lam.shape[0]
  return np.abs(direction[:n]) / it.x, np.abs(direction[n + m:]) / it.z


def gentle_sigma(enabled: bool, qn_step: bool, sigma: float) -> float:
  return _GENTLE_SIGMA if enabled and qn_step else sigma


def predictor_corrector(op: QnOperator, qp: QuadraticProgram, it: IterateState,
                        reg: Regularization, *, second_order: bool = True,
                        sigma_override=None) -> tuple[np.ndarray, float]:
  """Affine predictor plus one centering corrector; two applications of ``op``.

  ``sigma_override``, if given, maps the Mehrotra sigma to the one used.
  """
  n, m = qp.n, qp.m
  mu = it.mu
  d_aff = op.apply(-eval_F_reg(qp, it, reg))
  dx, dz = d_aff[:n], d_aff[n + m:]
  ap = min(1.0, _max_step(it.x, dx))
  ad = min(1.0, _max_step(it.z, dz))
  mu_aff = float((it.x + ap * dx) @ (it.z + ad * dz)) / n
  ratio = mu_aff / mu if mu > 0 and np.isfinite(mu_aff) else 1.0
  sigma = float(np.clip(ratio ** 3, _SIGMA_MIN, _SIGMA_MAX))
  if sigma_override is not None:
    sigma = sigma_override(sigma)
  rhs = np.zeros(2 * n + m)
  rhs[n + m:] = sigma * mu
  if second_order:
    rhs[n + m:] -= dx * dz
  return d_aff + op.apply(rhs), sigma


def centrality_correctors(op: QnOperator, qp: QuadraticProgram, it: IterateState,
                          direction: np.ndarray, sigma: float, *, tau: float,
                          max_correctors: int) -> tuple[np.ndarray, float, float, int]:
  """Multiple centrality correctors; returns (direction, alpha_p, alpha_d, accepted).

  A corrector is kept only when it raises ``alpha_p + alpha_d`` by at least
  0.1. Each round is one application of ``op``.
  """
  n, m = qp.n, qp.m
  ap, ad = step_sizes(it, direction, tau)
  mu_t = sigma * it.mu
  accepted = 0
  for _ in range(max_correctors):
    if ap >= 1.0 and ad >= 1.0:
      break
    tp, td = min(1.0, ap + _STEP_BOOST), min(1.0, ad + _STEP_BOOST)
    v = (it.x + tp * direction[:n]) * (it.z + td * direction[n + m:])
    target = np.clip(v, _TARGET_LO * mu_t, _TARGET_HI * mu_t)
    rhs = np.zeros(2 * n + m)
    rhs[n + m:] = target - v
    trial = direction + op.apply(rhs)
    if not np.all(np.isfinite(trial)):
      break
    new_ap, new_ad = step_sizes(it, trial, tau)
    if new_ap + new_ad < ap + ad + _CORRECTOR_GAIN:
      break
    direction, ap, ad = trial, new_ap, new_ad
    accepted += 1
  return direction, ap, ad, accepted


def qn_decide(row: TraceRow, ell: int, opts: SolverOptions) -> Decision:
  """Whether to keep the new secant pair (Store) or refactor next (Reset).

  Memory must have room for one more pair. After a Newton step that is all;
  after a quasi-Newton step the configured step-size or centrality test
  must also hold.
  """
  if ell >= opts.effective_ell_max:
    return Decision.RESET
  if row.step == "newton":
    return Decision.STORE
  if opts.eps_alpha is not None:
    ok = row.alpha_p + row.alpha_d >= opts.eps_alpha
  else:
    ok = row.xz_after <= opts.eps_c * row.xz_before
  return Decision.STORE if ok else Decision.RESET


def check_termination(qp: QuadraticProgram, it: IterateState,
                      res: tuple[float, float, float], *, stall: int, k: int,
                      opts: SolverOptions, after_newton: bool = True) -> Status | None:
  """Status to stop with at the top of iteration ``k``, or None to continue.

  ``stall`` counts consecutive iterations whose mu reduction factor exceeded
  ``opts.stall_factor``. ``after_newton`` says whether ``it`` came from a
  Newton step; quasi-Newton steps can drive mu down ahead of the residuals
  and are not taken as evidence of infeasibility.
  """
  tol_p, tol_d, tol_opt = tolerances(qp, opts)
  if res[0] <= tol_p and res[1] <= tol_d and res[2] <= tol_opt:
    return Status.OPTIMAL
  if stall >= opts.stall_window and it.mu / (1.0 + abs(float(qp.c @ it.x))) <= 1e3 * tol_opt:
    return Status.LACK_OF_IMPROVEMENT
  if k >= opts.max_iter:
    return Status.ITERATION_LIMIT
  if max(np.max(it.x), np.max(it.z), np.max(np.abs(it.lam), initial=0.0)) > _DIVERGENCE:
    return Status.INFEASIBLE_SUSPECTED
  # complementarity gone while a residual stays put, even after a fresh
  # Newton step: the iterates are drifting along a ray, not converging
  if after_newton and k >= _COLLAPSE_MIN_ITER and res[2] <= _COLLAPSE * tol_opt and (res[0] > tol_p or res[1] > tol_d):
    return Status.INFEASIBLE_SUSPECTED
  if not (it.is_interior() and np.all(np.isfinite(it.lam))):
    return Status.FAILURE
  return None


def _reg_scale(qp: QuadraticProgram) -> float:
  vals = [1.0]
  if qp.A.nnz:
    vals.append(float(abs(qp.A).max()))
  if qp.Q.nnz:
    vals.append(float(abs(qp.Q).max()))
  return max(vals)


class _Session:
  """Mutable per-solve bookkeeping."""

  def __init__(self, qp, opts):
    self.qp = qp
    self.opts = opts
    self.delta = opts.reg_base * _reg_scale(qp)
    self.facts: list[KktFactorization] = []
    self.attempts = 0
    self.inertias: list[tuple[int, int, int]] = []

  def factorize(self, it: IterateState) -> KktFactorization:
    for retry in range(_REG_RETRIES + 1):
      reg = Regularization.uniform(it, self.delta)
      self.attempts += 1
      try:
        fact = linalg.factorize(self.qp, it, reg, backend=self.opts.backend)
      except FactorizationBreakdown as e:
        logger.debug("factorization breakdown (%s), delta=%g", e, self.delta)
        if retry == _REG_RETRIES:
          raise
        self.delta *= _REG_ESCALATION
        continue
      self.facts.append(fact)
      self.inertias.append(linalg.inertia(fact))
      return fact
    raise AssertionError("unreachable")

  @property
  def backsolves(self) -> int:
    return sum(f.solve_count for f in self.facts)


def solve(qp: QuadraticProgram, opts: SolverOptions | None = None) -> SolverReport:
  """Runs the interior point method on a standard-form problem."""
  opts = opts or SolverOptions()
  qp.validate()
  start = time.perf_counter()
  ell_max = opts.effective_ell_max
  use_mcc_newton = opts.mode in (Mode.NEWTON_MC, Mode.QN_MC)
  session = _Session(qp, opts)

  it = _STARTS[opts.start](qp)
  op: QnOperator | None = None
  need_factor = True
  trace: list[TraceRow] = []
  stall = 0
  status = Status.ITERATION_LIMIT
  message = ""

  if opts.verbose:
    logger.info(_HEADER)

  k = 0
  while True:
    res = residuals(qp, it)
    stop = check_termination(qp, it, res, stall=stall, k=k, opts=opts,
                             after_newton=not trace or trace[-1].step == "newton")
    if stop is not None:
      status = stop
      if stop is Status.FAILURE:
        message = "iterate left the interior of the positive orthant"
      break

    inertia = None
    try:
      if need_factor:
        fact = session.factorize(it)
        inertia = session.inertias[-1]
        op = QnOperator(fact, opts.update_kind, ell_max) if op is None else op.reset(fact)
        need_factor = False
      newton = op.ell == 0
      reg = op.base.snapshot_reg.with_reference(it)
      direction, sigma = _direction(op, qp, it, reg, opts, newton)
      if not newton and not np.all(np.isfinite(direction)):
        logger.debug("non-finite quasi-Newton direction at k=%d; refactoring", k)
        fact = session.factorize(it)
        inertia = session.inertias[-1]
        op.reset(fact)
        newton = True
        reg = op.base.snapshot_reg.with_reference(it)
        direction, sigma = _direction(op, qp, it, reg, opts, newton)
    except FactorizationBreakdown as e:
      status = Status.FAILURE
      message = f"factorization breakdown after regularization retries: {e}"
      break

    if not np.all(np.isfinite(direction)):
      status = Status.FAILURE
      message = "non-finite Newton direction"
      break

    if newton and not use_mcc_newton or opts.max_correctors == 0:
      ap, ad = step_sizes(it, direction, opts.tau)
      ncorr = 0
    else:
      direction, ap, ad, ncorr = centrality_correctors(
          op, qp, it, direction, sigma, tau=opts.tau, max_correctors=opts.max_correctors)

    if not newton and min(ap, ad) < opts.qn_min_step:
      try:
        fact = session.factorize(it)
      except FactorizationBreakdown as e:
        status = Status.FAILURE
        message = f"factorization breakdown after regularization retries: {e}"
        break
      inertia = session.inertias[-1]
      op.reset(fact)
      newton = True
      reg = op.base.snapshot_reg.with_reference(it)
      direction, sigma = _direction(op, qp, it, reg, opts, newton)
      if not use_mcc_newton or opts.max_correctors == 0:
        ap, ad = step_sizes(it, direction, opts.tau)
        ncorr = 0
      else:
        direction, ap, ad, ncorr = centrality_correctors(
            op, qp, it, direction, sigma, tau=opts.tau, max_correctors=opts.max_correctors)

    n, m = qp.n, qp.m
    new = it.moved(direction[:n], direction[n:n + m], direction[n + m:], ap, ad)
    bx, bz = blocking_report(it, direction)
    row = TraceRow(
        k=k, step="newton" if newton else "qn", ell=op.ell, mu=it.mu,
        alpha_p=ap, alpha_d=ad, sigma=sigma, correctors=ncorr,
        primal_inf=res[0], dual_inf=res[1], opt_gap=res[2],
        xz_before=float(it.x @ it.z), xz_after=float(new.x @ new.z),
        min_x=float(np.min(new.x)), min_z=float(np.min(new.z)),
        max_blocking=float(max(np.max(bx), np.max(bz))), inertia=inertia)

    decision = qn_decide(row, op.ell, opts)
    if decision is Decision.STORE:
      s = new.stacked() - it.stacked()
      y = eval_F_reg(qp, new, reg) - eval_F_reg(qp, it, reg)
      if not np.any(s) or not op.record_pair(s, y):
        decision = Decision.RESET
    need_factor = decision is Decision.RESET
    row.decision = decision.value
    trace.append(row)
    if opts.verbose:
      logger.info(row.format())

    stall = stall + 1 if new.mu > opts.stall_factor * it.mu else 0
    it = new
    k += 1

  newton_steps = sum(r.step == "newton" for r in trace)
  report = SolverReport(
      status=status, iterations=len(trace), factorizations=len(session.facts),
      backsolves=session.backsolves, qn_steps=len(trace) - newton_steps,
      newton_steps=newton_steps, objective=qp.objective(it.x),
      residuals=residuals(qp, it), x=it.x, lam=it.lam, z=it.z, trace=trace,
      options=opts, seconds=time.perf_counter() - start,
      factorization_attempts=session.attempts, inertias=session.inertias,
      message=message)
  if opts.verbose:
    logger.info(report.summary().splitlines()[-1])
  return report


def _direction(op, qp, it, reg, opts, newton):
  override = None
  if opts.gentle_sigma and not newton:
    override = lambda s: gentle_sigma(True, True, s)  # noqa: E731
  return predictor_corrector(op, qp, it, reg, second_order=opts.second_order,
                             sigma_override=override)
