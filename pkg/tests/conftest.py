from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

from qnipm.kernel import IterateState, Regularization, dense_J, eval_F_reg
from qnipm.linalg import factorize
from qnipm.problem import QuadraticProgram
from qnipm.quasinewton import QnOperator

DATA = Path(__file__).resolve().parents[1] / "src" / "qnipm" / "data"

AFIRO_OPTIMUM = -464.75314285714285


def random_qp(rng, n, m, *, lp=False, density=0.5):
  """Small instance with full-row-rank A and PSD Q (dense-friendly)."""
  while True:
    A = rng.standard_normal((m, n)) * (rng.random((m, n)) < density)
    for i in range(m):
      A[i, rng.integers(n)] = rng.standard_normal() + 2.0
    if m == 0 or np.linalg.matrix_rank(A) == m:
      break
  if lp:
    Q = np.zeros((n, n))
  else:
    L = rng.standard_normal((n, max(1, n // 2)))
    Q = L @ L.T
  return QuadraticProgram(Q=sp.csr_matrix(Q), A=sp.csr_matrix(A),
                          b=rng.standard_normal(m), c=rng.standard_normal(n))


def random_state(rng, n, m, scale=1.0):
  return IterateState(rng.uniform(0.1, 2.0, n) * scale, rng.standard_normal(m),
                      rng.uniform(0.1, 2.0, n) * scale)


def random_reg(rng, it, delta=1e-3):
  return Regularization(np.full(it.n, delta), np.full(it.lam.shape[0], delta),
                        it.x + 0.1 * rng.standard_normal(it.n),
                        it.lam + 0.1 * rng.standard_normal(it.lam.shape[0]))


def analytic_qp():
  """min 1/2 |x|^2  s.t.  x1 + x2 = 2; solution (1, 1), lam 1, z 0."""
  return QuadraticProgram(Q=sp.identity(2), A=sp.csr_matrix([[1.0, 1.0]]),
                          b=np.array([2.0]), c=np.zeros(2), name="analytic-qp")


def analytic_lp():
  """min x1 + 2 x2  s.t.  x1 + x2 = 1; solution (1, 0)."""
  return QuadraticProgram(Q=sp.csr_matrix((2, 2)), A=sp.csr_matrix([[1.0, 1.0]]),
                          b=np.array([1.0]), c=np.array([1.0, 2.0]), name="analytic-lp")


def make_chain(rng, kind, ell, n=4, m=2, rd=1e-3, rp=1e-3):
  """A base factorization plus ``ell`` secant pairs taken from real F-hat differences.

  Regularization is frozen for the whole chain, as in the solver.
  """
  qp = random_qp(rng, n, m)
  it = random_state(rng, n, m)
  reg = Regularization(np.full(n, rp), np.full(m, rd), it.x.copy(), it.lam.copy())
  fact = factorize(qp, it, reg)
  op = QnOperator(fact, kind, ell_max=max(ell, 1))
  cur = it
  while op.ell < ell:
    step = rng.standard_normal(2 * n + m) * 0.3
    new = IterateState(cur.x * np.exp(step[:n]), cur.lam + step[n:n + m],
                       cur.z * np.exp(step[n + m:]))
    s = new.stacked() - cur.stacked()
    y = eval_F_reg(qp, new, reg) - eval_F_reg(qp, cur, reg)
    op.record_pair(s, y)
    cur = new
  base = dense_J(qp, fact.snapshot_state(), fact.snapshot_reg)
  return qp, fact, op, base


@pytest.fixture
def rng():
  return np.random.default_rng(20240611)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
  if ACCEPTANCE_LINES:
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
      terminalreporter.write_line(line)
