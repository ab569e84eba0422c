"""KKT residual map, its regularized variant and the unreduced Jacobian.

Vectors in the full space are stacked as ``(x, lam, z)`` with block sizes
``(n, m, n)``.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from qnipm.problem import QuadraticProgram


@dataclasses.dataclass
class IterateState:
  """A primal-dual point with ``x > 0`` and ``z > 0``."""

  x: np.ndarray
  lam: np.ndarray
  z: np.ndarray
  k: int = 0

  @property
  def n(self) -> int:
    return self.x.shape[0]

  @property
  def mu(self) -> float:
    return float(self.x @ self.z) / self.n if self.n else 0.0

  def stacked(self) -> np.ndarray:
    return np.concatenate([self.x, self.lam, self.z])

  def is_interior(self) -> bool:
    return bool(np.all(self.x > 0) and np.all(self.z > 0))

  def moved(self, dx, dlam, dz, alpha_p: float, alpha_d: float) -> "IterateState":
    return IterateState(self.x + alpha_p * dx, self.lam + alpha_d * dlam,
                        self.z + alpha_d * dz, self.k + 1)

  def copy(self) -> "IterateState":
    return IterateState(self.x.copy(), self.lam.copy(), self.z.copy(), self.k)


@dataclasses.dataclass
class Regularization:
  """Primal/dual proximal diagonals and the reference point they pull toward."""

  rp: np.ndarray
  rd: np.ndarray
  ref_x: np.ndarray
  ref_lam: np.ndarray

  def __post_init__(self):
    if np.any(self.rp < 0) or np.any(self.rd < 0):
      raise ValueError("regularization diagonals must be nonnegative")

  @classmethod
  def zero(cls, n: int, m: int) -> "Regularization":
    return cls(np.zeros(n), np.zeros(m), np.zeros(n), np.zeros(m))

  @classmethod
  def uniform(cls, it: IterateState, delta: float) -> "Regularization":
    return cls(np.full(it.x.shape[0], delta), np.full(it.lam.shape[0], delta),
               it.x.copy(), it.lam.copy())

  def with_reference(self, it: IterateState) -> "Regularization":
    """Same diagonals, reference point moved to ``it``."""
    return Regularization(self.rp, self.rd, it.x.copy(), it.lam.copy())

  def same_diagonals(self, other: "Regularization") -> bool:
    return np.array_equal(self.rp, other.rp) and np.array_equal(self.rd, other.rd)


def split(qp: QuadraticProgram, v: np.ndarray):
  n, m = qp.n, qp.m
  return v[:n], v[n:n + m], v[n + m:]


def _check(qp: QuadraticProgram, it: IterateState) -> None:
  if it.x.shape != (qp.n,) or it.z.shape != (qp.n,) or it.lam.shape != (qp.m,):
    raise ValueError(
        f"iterate shapes {it.x.shape}, {it.lam.shape}, {it.z.shape} do not "
        f"match n={qp.n}, m={qp.m}")


def eval_F(qp: QuadraticProgram, it: IterateState) -> np.ndarray:
  """Returns ``[-Qx + A'lam + z - c; Ax - b; XZe]``."""
  _check(qp, it)
  x, lam, z = it.x, it.lam, it.z
  return np.concatenate([
      -(qp.Q @ x) + qp.A.T @ lam + z - qp.c,
      qp.A @ x - qp.b,
      x * z,
  ])


def eval_F_reg(qp: QuadraticProgram, it: IterateState,
               reg: Regularization) -> np.ndarray:
  """The regularized residual whose Jacobian is :func:`apply_J`'s matrix.

  First block gains ``-Rp (x - ref_x)``, second block ``+Rd (lam - ref_lam)``.
  """
  F = eval_F(qp, it)
  n, m = qp.n, qp.m
  F[:n] -= reg.rp * (it.x - reg.ref_x)
  F[n:n + m] += reg.rd * (it.lam - reg.ref_lam)
  return F


def apply_J(qp: QuadraticProgram, it: IterateState, reg: Regularization,
            v: np.ndarray) -> np.ndarray:
  """Multiplies the regularized unreduced Jacobian at ``it`` by ``v``."""
  _check(qp, it)
  v1, v2, v3 = split(qp, np.asarray(v, dtype=float))
  return np.concatenate([
      -(qp.Q @ v1) - reg.rp * v1 + qp.A.T @ v2 + v3,
      qp.A @ v1 + reg.rd * v2,
      it.z * v1 + it.x * v3,
  ])


def dense_J(qp: QuadraticProgram, it: IterateState,
            reg: Regularization) -> np.ndarray:
  """Dense assembly of the regularized unreduced Jacobian (tests, oracles)."""
  n, m = qp.n, qp.m
  A = qp.A.toarray()
  J = np.zeros((2 * n + m, 2 * n + m))
  J[:n, :n] = -qp.Q.toarray() - np.diag(reg.rp)
  J[:n, n:n + m] = A.T
  J[:n, n + m:] = np.eye(n)
  J[n:n + m, :n] = A
  J[n:n + m, n:n + m] = np.diag(reg.rd)
  J[n + m:, :n] = np.diag(it.z)
  J[n + m:, n + m:] = np.diag(it.x)
  return J


def residuals(qp: QuadraticProgram, it: IterateState) -> tuple[float, float, float]:
  """Relative primal infeasibility, dual infeasibility and optimality gap.

  The dual residual keeps the ``Qx`` term so that it measures stationarity
  for quadratic objectives.
  """
  _check(qp, it)
  x, lam, z = it.x, it.lam, it.z
  primal = np.linalg.norm(qp.b - qp.A @ x) / (1.0 + np.linalg.norm(qp.b))
  dual = np.linalg.norm(qp.c + qp.Q @ x - qp.A.T @ lam - z) / (
      1.0 + np.linalg.norm(qp.c))
  gap = it.mu / (1.0 + abs(qp.objective(x)))
  return float(primal), float(dual), float(gap)
