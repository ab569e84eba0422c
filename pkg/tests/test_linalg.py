import threading

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import random_qp, random_reg, random_state
from qnipm import linalg
from qnipm.kernel import IterateState, Regularization, apply_J
from qnipm.linalg import FactorizationBreakdown, assemble_K, factorize, inertia, solve_newton
from qnipm.problem import QuadraticProgram

BACKENDS = ["dense", "sparse"]


def _one_by_one():
  qp = QuadraticProgram(Q=sp.csr_matrix((1, 1)), A=sp.csr_matrix([[1.0]]), b=[1.0], c=[0.0])
  return qp, IterateState(np.ones(1), np.zeros(1), np.ones(1))


def test_two_by_two_hand_elimination():
  qp, it = _one_by_one()
  fact = factorize(qp, it, Regularization.zero(1, 1))
  np.testing.assert_array_equal(fact.d, [-1.0, 1.0])
  assert fact.L[1, 0] == -1.0
  assert inertia(fact) == (1, 1, 0)


def test_three_by_three_hand_solve():
  qp, it = _one_by_one()
  fact = factorize(qp, it, Regularization.zero(1, 1))
  np.testing.assert_allclose(solve_newton(fact, np.array([1.0, 0.0, 0.0])), [0.0, 1.0, 0.0],
                             atol=1e-15)


@pytest.mark.parametrize("backend", BACKENDS)
def test_no_constraints_all_negative(backend):
  n = 4
  qp = QuadraticProgram(Q=sp.identity(n), A=sp.csr_matrix((0, n)), b=np.zeros(0), c=np.ones(n))
  it = IterateState(np.ones(n), np.zeros(0), np.ones(n))
  fact = factorize(qp, it, Regularization.zero(n, 0), backend=backend)
  assert np.all(fact.d < 0)
  assert inertia(fact) == (n, 0, 0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_inertia_matches_eigenvalue_count(rng, backend):
  for _ in range(10):
    qp = random_qp(rng, 5, 3)
    it = random_state(rng, 5, 3)
    reg = Regularization.uniform(it, 1e-8)
    fact = factorize(qp, it, reg, backend=backend)
    eig = np.linalg.eigvalsh(assemble_K(qp, it.x, it.z, reg).toarray())
    assert inertia(fact) == (int(np.sum(eig < 0)), int(np.sum(eig > 0)), 0) == (5, 3, 0)


def test_zero_pivot_raises():
  qp = QuadraticProgram(Q=sp.csr_matrix((2, 2)), A=sp.csr_matrix([[1.0, 0.0], [1.0, 0.0]]),
                        b=[1.0, 1.0], c=[0.0, 0.0])
  it = IterateState(np.ones(2), np.zeros(2), np.ones(2))
  with pytest.raises(FactorizationBreakdown):
    factorize(qp, it, Regularization.zero(2, 2))


def test_factorize_needs_interior_point(rng):
  qp = random_qp(rng, 3, 1)
  it = IterateState(np.array([1.0, 0.0, 1.0]), np.zeros(1), np.ones(3))
  with pytest.raises(ValueError):
    factorize(qp, it, Regularization.zero(3, 1))


@pytest.mark.parametrize("backend", BACKENDS)
def test_zero_rhs_gives_zero(rng, backend):
  qp = random_qp(rng, 4, 2)
  it = random_state(rng, 4, 2)
  fact = factorize(qp, it, random_reg(rng, it), backend=backend)
  np.testing.assert_array_equal(solve_newton(fact, np.zeros(10)), np.zeros(10))


@pytest.mark.parametrize("backend", BACKENDS)
def test_apply_then_solve_round_trip(rng, backend):
  qp = random_qp(rng, 8, 4)
  it = random_state(rng, 8, 4)
  reg = random_reg(rng, it)
  fact = factorize(qp, it, reg, backend=backend)
  w = rng.standard_normal(20)
  got = solve_newton(fact, apply_J(qp, it, reg, w))
  assert np.linalg.norm(got - w) <= 1e-9 * np.linalg.norm(w)


@pytest.mark.parametrize("backend", BACKENDS)
def test_solve_residual_contract(backend):
  rng = np.random.default_rng(7)
  for _ in range(100):
    n = int(rng.integers(2, 31))
    m = int(rng.integers(1, min(15, n - 1) + 1))
    qp = random_qp(rng, n, m, lp=bool(rng.integers(2)))
    it = random_state(rng, n, m)
    reg = Regularization.uniform(it, 1e-8)
    fact = factorize(qp, it, reg, backend=backend)
    rhs = rng.standard_normal(2 * n + m)
    r = apply_J(qp, fact.snapshot_state(), fact.snapshot_reg, solve_newton(fact, rhs)) - rhs
    assert np.max(np.abs(r)) <= 1e-8 * (1 + np.max(np.abs(rhs)))


def test_backends_agree(rng):
  qp = random_qp(rng, 12, 5)
  it = random_state(rng, 12, 5)
  reg = Regularization.uniform(it, 1e-6)
  rhs = rng.standard_normal(29)
  a = solve_newton(factorize(qp, it, reg, backend="dense"), rhs)
  b = solve_newton(factorize(qp, it, reg, backend="sparse"), rhs)
  np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-10)


def test_counter_increments_on_factorize_only(rng):
  qp = random_qp(rng, 4, 2)
  it = random_state(rng, 4, 2)
  f0, s0 = linalg.counters.snapshot()
  fact = factorize(qp, it, random_reg(rng, it))
  assert linalg.counters.snapshot() == (f0 + 1, s0)
  for _ in range(5):
    solve_newton(fact, rng.standard_normal(10))
  assert linalg.counters.snapshot() == (f0 + 1, s0 + 5)
  assert fact.solve_count == 5


def test_snapshot_is_frozen(rng):
  qp = random_qp(rng, 4, 2)
  it = random_state(rng, 4, 2)
  fact = factorize(qp, it, random_reg(rng, it))
  x0 = fact.snapshot_x.copy()
  it.x *= 3.0
  np.testing.assert_array_equal(fact.snapshot_x, x0)


def test_wrong_rhs_shape(rng):
  qp = random_qp(rng, 4, 2)
  it = random_state(rng, 4, 2)
  fact = factorize(qp, it, random_reg(rng, it))
  with pytest.raises(ValueError):
    solve_newton(fact, np.zeros(9))


def test_concurrent_solves_share_factorization(rng):
  qp = random_qp(rng, 10, 4)
  it = random_state(rng, 10, 4)
  fact = factorize(qp, it, random_reg(rng, it))
  rhss = [rng.standard_normal(24) for _ in range(8)]
  expected = [solve_newton(fact, r) for r in rhss]
  out = [None] * 8

  def work(i):
    out[i] = solve_newton(fact, rhss[i])

  threads = [threading.Thread(target=work, args=(i,)) for i in range(8)]
  for t in threads:
    t.start()
  for t in threads:
    t.join()
  for a, b in zip(out, expected):
    np.testing.assert_array_equal(a, b)
  assert fact.solve_count == 16
