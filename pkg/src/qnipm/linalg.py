"""LDL' factorization of the regularized augmented system and Newton solves.

Eliminating ``dz`` from the unreduced system leaves the quasi-definite matrix

    K = [ -(Q + Rp + X^-1 Z)   A' ]
        [          A           Rd ]

which has an LDL' factorization with diagonal ``D`` under any symmetric
permutation. We factor without numerical pivoting and check pivot signs.
"""

from __future__ import annotations

import dataclasses
import threading
import time

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.csgraph
import scipy.sparse.linalg

from qnipm.kernel import IterateState, Regularization, apply_J
from qnipm.problem import QuadraticProgram


class FactorizationBreakdown(ArithmeticError):
  """A zero, non-finite or wrongly signed pivot was met."""

  def __init__(self, index: int, pivot: float):
    super().__init__(f"pivot {index} is {pivot!r}")
    self.index = index
    self.pivot = pivot


class _Counters:
  """Process-wide operation counts, for cost accounting in tests and benchmarks."""

  def __init__(self):
    self._lock = threading.Lock()
    self.factorizations = 0
    self.solves = 0

  def bump(self, name: str) -> None:
    with self._lock:
      setattr(self, name, getattr(self, name) + 1)

  def snapshot(self) -> tuple[int, int]:
    return self.factorizations, self.solves


counters = _Counters()


@dataclasses.dataclass
class FactorStats:
  nnz_K: int
  nnz_L: int
  seconds: float
  backend: str


class KktFactorization:
  """Factors of ``K`` plus the data needed to rebuild the unreduced matrix.

  ``snapshot_x``/``snapshot_z``/``snapshot_reg`` are frozen copies taken at
  factorization time; solves always use them, never the caller's current
  iterate.
  """

  def __init__(self, qp, snapshot_x, snapshot_z, snapshot_reg, perm, L, d, stats):
    self.qp = qp
    self.snapshot_x = snapshot_x
    self.snapshot_z = snapshot_z
    self.snapshot_reg = snapshot_reg
    self.perm = perm
    self.L = L
    self.d = d
    self.stats = stats
    self.solve_count = 0
    self._lock = threading.Lock()

  @property
  def n(self) -> int:
    return self.qp.n

  @property
  def m(self) -> int:
    return self.qp.m

  def snapshot_state(self) -> IterateState:
    return IterateState(self.snapshot_x, np.zeros(self.m), self.snapshot_z)

  def _solve_K(self, rhs: np.ndarray) -> np.ndarray:
    p = self.perm
    y = rhs[p]
    if sp.issparse(self.L):
      y = scipy.sparse.linalg.spsolve_triangular(self.L, y, lower=True, unit_diagonal=True)
      y = y / self.d
      y = scipy.sparse.linalg.spsolve_triangular(
          sp.csr_matrix(self.L.T), y, lower=False, unit_diagonal=True)
    else:
      y = scipy.linalg.solve_triangular(self.L, y, lower=True, unit_diagonal=True,
                                        check_finite=False)
      y = y / self.d
      y = scipy.linalg.solve_triangular(self.L, y, lower=True, trans="T",
                                        unit_diagonal=True, check_finite=False)
    out = np.empty_like(y)
    out[p] = y
    return out

  def _unreduced_solve(self, rhs: np.ndarray) -> np.ndarray:
    n, m = self.n, self.m
    r1, r2, r3 = rhs[:n], rhs[n:n + m], rhs[n + m:]
    x, z = self.snapshot_x, self.snapshot_z
    aug = self._solve_K(np.concatenate([r1 - r3 / x, r2]))
    dx, dlam = aug[:n], aug[n:]
    dz = (r3 - z * dx) / x
    return np.concatenate([dx, dlam, dz])


def assemble_K(qp: QuadraticProgram, x: np.ndarray, z: np.ndarray,
               reg: Regularization) -> sp.csc_matrix:
  top = -(qp.Q + sp.diags(reg.rp + z / x))
  return sp.csc_matrix(sp.bmat([[top, qp.A.T], [qp.A, sp.diags(reg.rd)]]))


def _expected_signs(n: int, m: int) -> np.ndarray:
  return np.concatenate([-np.ones(n), np.ones(m)])


def _dense_ldl(K: np.ndarray, signs: np.ndarray):
  N = K.shape[0]
  W = K.copy()
  L = np.eye(N)
  d = np.empty(N)
  for j in range(N):
    piv = W[j, j]
    if not np.isfinite(piv) or piv == 0.0 or np.sign(piv) != signs[j]:
      raise FactorizationBreakdown(j, float(piv))
    d[j] = piv
    col = W[j + 1:, j] / piv
    L[j + 1:, j] = col
    W[j + 1:, j + 1:] -= piv * np.outer(col, col)
  return L, d


def _sparse_ldl(K: sp.csc_matrix, signs: np.ndarray):
  """Up-looking LDL' on the upper triangle (elimination-tree based)."""
  N = K.shape[0]
  U = sp.csc_matrix(sp.triu(K))
  U.sort_indices()
  Ap, Ai, Ax = U.indptr, U.indices, U.data

  parent = np.full(N, -1)
  flag = np.empty(N, dtype=int)
  lnz = np.zeros(N, dtype=int)
  for k in range(N):
    flag[k] = k
    for p in range(Ap[k], Ap[k + 1]):
      i = Ai[p]
      while i < k and flag[i] != k:
        if parent[i] == -1:
          parent[i] = k
        lnz[i] += 1
        flag[i] = k
        i = parent[i]
  Lp = np.concatenate([[0], np.cumsum(lnz)])
  Li = np.empty(Lp[-1], dtype=int)
  Lx = np.empty(Lp[-1])

  y = np.zeros(N)
  pattern = np.empty(N, dtype=int)
  fill = np.zeros(N, dtype=int)
  d = np.empty(N)
  for k in range(N):
    top = N
    flag[k] = k
    for p in range(Ap[k], Ap[k + 1]):
      i = Ai[p]
      y[i] += Ax[p]
      length = 0
      while i < k and flag[i] != k:
        pattern[length] = i
        length += 1
        flag[i] = k
        i = parent[i]
      while length > 0:
        top -= 1
        length -= 1
        pattern[top] = pattern[length]
    dk = y[k]
    y[k] = 0.0
    for t in range(top, N):
      i = pattern[t]
      yi = y[i]
      y[i] = 0.0
      p2 = Lp[i] + fill[i]
      for p in range(Lp[i], p2):
        y[Li[p]] -= Lx[p] * yi
      lki = yi / d[i]
      dk -= lki * yi
      Li[p2] = k
      Lx[p2] = lki
      fill[i] += 1
    if not np.isfinite(dk) or dk == 0.0 or np.sign(dk) != signs[k]:
      raise FactorizationBreakdown(k, float(dk))
    d[k] = dk
  # Li holds row indices per column of L (CSC, strictly lower).
  L = sp.csc_matrix((Lx, Li, Lp), shape=(N, N)) + sp.identity(N, format="csc")
  return sp.csr_matrix(L), d


def factorize(qp: QuadraticProgram, it: IterateState, reg: Regularization,
              backend: str = "dense") -> KktFactorization:
  """Factors ``K`` at ``it`` and freezes the snapshot used by later solves.

  ``backend`` is ``"dense"`` (natural order, primal block first) or
  ``"sparse"`` (reverse Cuthill-McKee order within the primal and dual
  blocks, primal block first; elimination-tree LDL').
  Raises :class:`FactorizationBreakdown` when a pivot is zero or has the
  wrong sign; the caller should raise the regularization and retry.
  """
  if not it.is_interior():
    raise ValueError("factorize needs an interior iterate")
  n, m = qp.n, qp.m
  x, z = it.x.copy(), it.z.copy()
  reg = Regularization(reg.rp.copy(), reg.rd.copy(), reg.ref_x.copy(), reg.ref_lam.copy())
  K = assemble_K(qp, x, z, reg)
  signs = _expected_signs(n, m)
  start = time.perf_counter()
  if backend == "dense":
    perm = np.arange(n + m)
    L, d = _dense_ldl(K.toarray(), signs)
    nnz_L = int(np.count_nonzero(np.tril(L, -1)))
  elif backend == "sparse":
    pattern = sp.csr_matrix((np.ones(K.nnz), K.indices, K.indptr), shape=K.shape)
    rcm = np.asarray(scipy.sparse.csgraph.reverse_cuthill_mckee(
        pattern, symmetric_mode=True), dtype=int)
    # Primal pivots first keeps every pivot O(1) relative to the data: a
    # dual pivot taken early is just Rd and inflates everything after it.
    perm = np.concatenate([rcm[rcm < n], rcm[rcm >= n]])
    Kp = sp.csc_matrix(K[perm][:, perm])
    L, d = _sparse_ldl(Kp, signs[perm])
    nnz_L = int(L.nnz - (n + m))
  else:
    raise ValueError(f"unknown backend {backend!r}")
  elapsed = time.perf_counter() - start
  counters.bump("factorizations")
  stats = FactorStats(nnz_K=int(K.nnz), nnz_L=nnz_L, seconds=elapsed, backend=backend)
  return KktFactorization(qp, x, z, reg, perm, L, d, stats)


def solve_newton(fact: KktFactorization, rhs: np.ndarray) -> np.ndarray:
  """Solves ``J_snapshot @ delta = rhs`` via the augmented system.

  One step of iterative refinement against the unreduced matrix follows the
  direct solve.
  """
  rhs = np.asarray(rhs, dtype=float)
  N = 2 * fact.n + fact.m
  if rhs.shape != (N,):
    raise ValueError(f"rhs has shape {rhs.shape}, expected ({N},)")
  with fact._lock:
    fact.solve_count += 1
  counters.bump("solves")
  sol = fact._unreduced_solve(rhs)
  resid = rhs - apply_J(fact.qp, fact.snapshot_state(), fact.snapshot_reg, sol)
  return sol + fact._unreduced_solve(resid)


def inertia(fact: KktFactorization) -> tuple[int, int, int]:
  """Counts of negative, positive and zero pivots.

  Pivots legitimately span many orders of magnitude near the solution (from
  the dual regularization up to ``z_i / x_i``), so there is no relative
  cut-off: only exact zeros count as zero.
  """
  d = fact.d
  return int(np.sum(d < 0)), int(np.sum(d > 0)), int(np.sum(d == 0))
