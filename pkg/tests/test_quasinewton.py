import numpy as np
import pytest

from conftest import make_chain, random_state
from qnipm.linalg import factorize, solve_newton
from qnipm.quasinewton import (OracleError, QnOperator, SecantTriple, UpdateKind,
                               dense_oracle_apply, dense_oracle_matrix)

KINDS = list(UpdateKind)


@pytest.mark.parametrize("kind", KINDS)
def test_empty_chain_is_newton_solve(rng, kind):
  _, fact, op, _ = make_chain(rng, kind, 0)
  v = rng.standard_normal(10)
  np.testing.assert_array_equal(op.apply(v), solve_newton(fact, v))


@pytest.mark.parametrize("kind", KINDS)
def test_single_pair_secant(rng, kind):
  _, _, op, _ = make_chain(rng, kind, 1, n=3, m=2)
  t = op.triples[-1]
  np.testing.assert_allclose(op.apply(t.y), t.s, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("kind", KINDS)
def test_chain_matches_dense_oracle(rng, kind):
  _, _, op, base = make_chain(rng, kind, 3, n=4, m=2)
  v = rng.standard_normal(10)
  expected = dense_oracle_apply(base, op.triples, kind, v, n=4)
  np.testing.assert_allclose(op.apply(v), expected, rtol=1e-10,
                             atol=1e-10 * np.linalg.norm(expected))


def test_scalar_good_broyden_analogue():
  H = dense_oracle_matrix(np.array([[1.0]]), [SecantTriple(np.array([1.0]), np.array([2.0]), 2.0)],
                          UpdateKind.U3)
  # rho = s'Hy = 2, u = s - Hy = -1, and the secant equation H y = s
  assert H @ np.array([2.0]) == pytest.approx([1.0])


def test_good_broyden_rho_and_u(rng):
  qp, fact, _, base = make_chain(rng, UpdateKind.U3, 0, n=3, m=1)
  op = QnOperator(fact, "u3", ell_max=2)
  s = rng.standard_normal(7)
  y = base @ s * 2.0
  assert op.record_pair(s, y)
  t = op.triples[0]
  Hy = np.linalg.solve(base, y)
  assert t.rho == pytest.approx(s @ Hy, rel=1e-10)
  np.testing.assert_allclose(t.u, s - Hy, atol=1e-10)


def test_consistent_step_gives_trivial_u3_factor(rng):
  _, fact, _, base = make_chain(rng, UpdateKind.U3, 0, n=3, m=2)
  op = QnOperator(fact, "u3", ell_max=1)
  s = rng.standard_normal(8)
  assert op.record_pair(s, base @ s)
  assert np.linalg.norm(op.triples[0].u) <= 1e-10 * np.linalg.norm(s)
  v = rng.standard_normal(8)
  np.testing.assert_allclose(op.apply(v), solve_newton(fact, v), rtol=1e-9, atol=1e-12)


def test_u1_guard_is_scale_free(rng):
  _, fact, _, _ = make_chain(rng, "u1", 0, n=3, m=2)
  op = QnOperator(fact, "u1", ell_max=2)
  assert op.record_pair(np.ones(8), np.full(8, 1e-100))
  assert not op.record_pair(np.ones(8), np.zeros(8))
  assert op.ell == 1


def test_u2_guard_rejects_primal_only_y(rng):
  _, fact, _, _ = make_chain(rng, "u2", 0, n=3, m=2)
  op = QnOperator(fact, "u2", ell_max=2)
  y = np.zeros(8)
  y[:3] = 1.0  # invisible to the structured weight, so rho = 0
  assert not op.record_pair(np.ones(8), y)
  assert op.ell == 0


def test_u3_guard_rejects_orthogonal_step(rng):
  _, fact, _, base = make_chain(rng, "u3", 0, n=3, m=2)
  op = QnOperator(fact, "u3", ell_max=2)
  y = rng.standard_normal(8)
  Hy = np.linalg.solve(base, y)
  s = np.linalg.svd(Hy[None, :])[2][-1]  # s'Hy = 0
  assert not op.record_pair(s, y)
  assert op.ell == 0


def test_record_pair_contracts(rng):
  _, fact, _, _ = make_chain(rng, "u2", 0, n=3, m=2)
  op = QnOperator(fact, "u2", ell_max=1)
  with pytest.raises(ValueError):
    op.record_pair(np.zeros(8), np.ones(8))
  op.record_pair(np.ones(8), np.arange(8.0))
  with pytest.raises(ValueError):
    op.record_pair(np.ones(8), np.arange(8.0))


@pytest.mark.parametrize("kind", KINDS)
def test_one_base_solve_per_apply(rng, kind):
  _, fact, op, _ = make_chain(rng, kind, 4, n=5, m=2)
  before = fact.solve_count
  op.apply(rng.standard_normal(12))
  assert fact.solve_count == before + 1


def test_reset_installs_fresh_base(rng):
  qp, fact, op, _ = make_chain(rng, "u2", 3, n=4, m=2)
  other = factorize(qp, random_state(rng, 4, 2), fact.snapshot_reg)
  assert op.reset(other) is op
  assert op.ell == 0
  v = rng.standard_normal(10)
  np.testing.assert_array_equal(op.apply(v), solve_newton(other, v))


def test_u2_block_stays_zero_without_dual_regularization(rng):
  for _ in range(10):
    _, _, op, base = make_chain(rng, "u2", 4, n=4, m=3, rd=0.0)
    B = np.linalg.inv(dense_oracle_matrix(base, op.triples, "u2", n=4))
    assert np.max(np.abs(B[7:, 4:7])) <= 1e-12


def test_u2_block_fills_with_dual_regularization(rng):
  _, _, op, base = make_chain(rng, "u2", 3, n=4, m=3, rd=1e-2)
  B = np.linalg.inv(dense_oracle_matrix(base, op.triples, "u2", n=4))
  assert np.max(np.abs(B[7:, 4:7])) > 1e-8


@pytest.mark.parametrize("kind", KINDS)
def test_updates_only_touch_third_block_row(rng, kind):
  _, _, op, base = make_chain(rng, kind, 4, n=4, m=2)
  B = np.linalg.inv(dense_oracle_matrix(base, op.triples, kind, n=4))
  np.testing.assert_allclose(B[:6], base[:6], atol=1e-10)


def test_u2_differs_from_u1_on_same_data(rng):
  _, fact, op2, base = make_chain(rng, "u2", 2, n=4, m=2)
  op1 = QnOperator(fact, "u1", ell_max=2)
  for t in op2.triples:
    op1.record_pair(t.s, t.y)
  v = rng.standard_normal(10)
  assert np.linalg.norm(op1.apply(v) - op2.apply(v)) > 1e-8
  np.testing.assert_allclose(op1.apply(v), dense_oracle_apply(base, op1.triples, "u1", v),
                             rtol=1e-10, atol=1e-10)


def test_linearity_of_first_two_blocks(rng):
  for kind in KINDS:
    _, _, op, base = make_chain(rng, kind, 5, n=5, m=3)
    for t in op.triples:
      r = t.y - base @ t.s
      assert np.max(np.abs(r[:8])) <= 1e-10 * (1 + np.linalg.norm(t.s))


def test_oracle_rejects_singular_and_large():
  with pytest.raises(OracleError):
    dense_oracle_matrix(np.zeros((3, 3)), [], "u1")
  with pytest.raises(OracleError):
    dense_oracle_matrix(np.eye(61), [], "u1")
  with pytest.raises(OracleError):
    dense_oracle_matrix(np.eye(3), [], "u2")


def test_oracle_empty_chain_is_inverse(rng):
  M = rng.standard_normal((5, 5)) + 5 * np.eye(5)
  v = rng.standard_normal(5)
  np.testing.assert_allclose(dense_oracle_apply(M, [], "u3", v), np.linalg.solve(M, v))


def test_kind_parse():
  assert UpdateKind.parse("U2") is UpdateKind.U2
  assert UpdateKind.parse(UpdateKind.U3) is UpdateKind.U3
  with pytest.raises(ValueError):
    UpdateKind.parse("u4")
