"""Low-rank inverse approximations of the unreduced Jacobian.

An operator holds a factorization of the Jacobian at the iteration where it
was last refreshed plus an ordered list of secant pairs, and applies the
updated inverse with exactly one base solve:

* ``U1``: Broyden "bad" update of the inverse, ``w = y``.
* ``U2``: structured Broyden "bad" update, ``w = [0; y_b; y_mu]``; keeps the
  zero (3,2) block of the unregularized Jacobian and lets the solve be done
  as a modified right-hand side.
* ``U3``: Broyden "good" update, stored as ``(s, u = s - H y, rho = s'Hy)``.
"""

from __future__ import annotations

import dataclasses
import enum

import numpy as np

from qnipm.linalg import KktFactorization, solve_newton

RHO_GUARD = 1e-12


class UpdateKind(enum.Enum):
  U1 = "u1"
  U2 = "u2"
  U3 = "u3"

  @classmethod
  def parse(cls, value: "UpdateKind | str") -> "UpdateKind":
    if isinstance(value, cls):
      return value
    return cls(str(value).lower())


@dataclasses.dataclass(frozen=True)
class SecantTriple:
  """One secant pair with its update-specific scalar.

  ``u`` is only set for U3. ``y`` is kept for every kind so that the pairs can
  be replayed by the dense oracle and checked for linearity.
  """

  s: np.ndarray
  y: np.ndarray
  rho: float
  u: np.ndarray | None = None


def _weight(kind: UpdateKind, y: np.ndarray, n: int) -> np.ndarray:
  if kind is UpdateKind.U2:
    w = y.copy()
    w[:n] = 0.0
    return w
  return y


class QnOperator:
  """``H_k`` as a base factorization followed by ``len(triples)`` updates.

  With no triples ``apply`` is the plain Newton solve with the base.
  """

  def __init__(self, base: KktFactorization, kind: UpdateKind | str = UpdateKind.U2,
               ell_max: int = 5):
    if ell_max < 0:
      raise ValueError("ell_max must be nonnegative")
    self.base = base
    self.kind = UpdateKind.parse(kind)
    self.ell_max = ell_max
    self.triples: list[SecantTriple] = []

  @property
  def ell(self) -> int:
    return len(self.triples)

  @property
  def n(self) -> int:
    return self.base.n

  @property
  def m(self) -> int:
    return self.base.m

  def record_pair(self, s: np.ndarray, y: np.ndarray) -> bool:
    """Appends the pair ``(s, y)``; returns False if ``rho`` is too small.

    For U3 this costs one :meth:`apply` to form ``H_k y``.
    """
    if self.ell >= self.ell_max:
      raise ValueError(f"memory full (ell_max={self.ell_max})")
    s = np.array(s, dtype=float)
    y = np.array(y, dtype=float)
    if not np.any(s):
      raise ValueError("s must be nonzero")
    if self.kind is UpdateKind.U3:
      Hy = self.apply(y)
      rho = float(s @ Hy)
      if not abs(rho) >= RHO_GUARD * np.linalg.norm(s) * np.linalg.norm(y):
        return False
      self.triples.append(SecantTriple(s, y, rho, u=s - Hy))
      return True
    w = _weight(self.kind, y, self.n)
    rho = float(w @ y)
    if not abs(rho) >= RHO_GUARD * float(y @ y) or rho == 0.0:
      return False
    self.triples.append(SecantTriple(s, y, rho))
    return True

  def _alphas(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Newest-to-oldest recursion; returns (alphas oldest first, reduced q)."""
    q = np.array(v, dtype=float)
    alphas = np.zeros(self.ell)
    for idx in range(self.ell - 1, -1, -1):
      t = self.triples[idx]
      a = float(_weight(self.kind, t.y, self.n) @ q) / t.rho
      q -= a * t.y
      alphas[idx] = a
    return alphas, q

  def apply(self, v: np.ndarray) -> np.ndarray:
    """Returns ``H_k v`` using one solve with the base factorization."""
    v = np.asarray(v, dtype=float)
    if self.kind is UpdateKind.U1:
      alphas, q = self._alphas(v)
      r = solve_newton(self.base, q)
      for a, t in zip(alphas, self.triples):
        r += a * t.s
      return r
    if self.kind is UpdateKind.U2:
      alphas, _ = self._alphas(v)
      return solve_newton(self.base, v + self.structured_correction(alphas))
    r = solve_newton(self.base, v)
    for t in self.triples:
      r += (float(t.s @ r) / t.rho) * t.u
    return r

  def structured_correction(self, alphas: np.ndarray) -> np.ndarray:
    """``[0; 0; sum_i alpha_i (Z s_x + X s_z - y_mu)]`` with snapshot X, Z."""
    n, m = self.n, self.m
    x, z = self.base.snapshot_x, self.base.snapshot_z
    third = np.zeros(n)
    for a, t in zip(alphas, self.triples):
      third += a * (z * t.s[:n] + x * t.s[n + m:] - t.y[n + m:])
    out = np.zeros(2 * n + m)
    out[n + m:] = third
    return out

  def reset(self, base: KktFactorization) -> "QnOperator":
    """Drops all pairs and installs a fresh base; returns ``self``."""
    self.base = base
    self.triples = []
    return self


class OracleError(ValueError):
  pass


def dense_oracle_matrix(base_dense: np.ndarray, triples, kind: UpdateKind | str,
                        n: int | None = None) -> np.ndarray:
  """Materializes ``H_k`` from the explicit rank-one recursions.

  ``n`` (the primal size) is required for U2. Test-only; O(N^3).
  """
  kind = UpdateKind.parse(kind)
  base_dense = np.asarray(base_dense, dtype=float)
  if base_dense.shape[0] > 60:
    raise OracleError("dense oracle limited to dimension 60")
  try:
    H = np.linalg.inv(base_dense)
  except np.linalg.LinAlgError as e:
    raise OracleError("singular base matrix") from e
  if not np.all(np.isfinite(H)) or np.linalg.cond(base_dense) > 1e14:
    raise OracleError("singular base matrix")
  if kind is UpdateKind.U2 and n is None:
    raise OracleError("U2 needs the primal dimension n")
  for t in triples:
    s, y = t.s, t.y
    Hy = H @ y
    if kind is UpdateKind.U1:
      H = H + np.outer(s - Hy, y) / (y @ y)
    elif kind is UpdateKind.U2:
      w = y.copy()
      w[:n] = 0.0
      H = H + np.outer(s - Hy, w) / (w @ y)
    else:
      H = H + np.outer(s - Hy, s @ H) / (s @ Hy)
  return H


def dense_oracle_apply(base_dense: np.ndarray, triples, kind: UpdateKind | str,
                       v: np.ndarray, n: int | None = None) -> np.ndarray:
  return dense_oracle_matrix(base_dense, triples, kind, n) @ np.asarray(v, dtype=float)
