"""Problem ingestion: QPS/MPS parsing, standard-form transformation, recovery.

The solver works on

    min  1/2 x'Qx + c'x   s.t.  Ax = b,  x >= 0.

Files are read into a :class:`RawProblem` (equality rows, general bounds);
:func:`to_standard_form` shifts, negates, splits and slacks variables until
only ``x >= 0`` remains, and :func:`recover_solution` maps a standard-form
point back.
"""

from __future__ import annotations

import dataclasses
import io
import math
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np
import scipy.sparse as sp

_SECTIONS = (
    "NAME", "ROWS", "COLUMNS", "RHS", "RANGES", "BOUNDS",
    "QUADOBJ", "QMATRIX", "QSECTION", "ENDATA", "OBJSENSE",
)
_SYM_TOL = 1e-12


class QpsParseError(ValueError):
  """Raised on malformed QPS/MPS input; carries the offending line number."""

  def __init__(self, lineno: int, message: str):
    super().__init__(f"line {lineno}: {message}")
    self.lineno = lineno


class InfeasibleBoundsError(ValueError):
  """A variable has lower bound above its upper bound."""


@dataclasses.dataclass
class QuadraticProgram:
  """min 1/2 x'Qx + c'x  s.t.  Ax = b, x >= 0."""

  Q: sp.csr_matrix
  A: sp.csr_matrix
  b: np.ndarray
  c: np.ndarray
  name: str = ""

  def __post_init__(self):
    self.Q = sp.csr_matrix(self.Q, dtype=float)
    self.A = sp.csr_matrix(self.A, dtype=float)
    self.b = np.asarray(self.b, dtype=float).reshape(-1)
    self.c = np.asarray(self.c, dtype=float).reshape(-1)

  @property
  def n(self) -> int:
    return self.c.shape[0]

  @property
  def m(self) -> int:
    return self.b.shape[0]

  @property
  def is_lp(self) -> bool:
    return self.Q.count_nonzero() == 0

  def objective(self, x: np.ndarray) -> float:
    return float(self.c @ x + 0.5 * x @ (self.Q @ x))

  def validate(self) -> None:
    """Checks dimensions, symmetry of Q and that A has no empty row."""
    n, m = self.n, self.m
    if self.Q.shape != (n, n):
      raise ValueError(f"Q has shape {self.Q.shape}, expected ({n}, {n})")
    if self.A.shape != (m, n):
      raise ValueError(f"A has shape {self.A.shape}, expected ({m}, {n})")
    asym = abs(self.Q - self.Q.T)
    if asym.nnz:
      scale = abs(self.Q).maximum(abs(self.Q.T))
      rel = asym.multiply(sp.csr_matrix(scale).power(-1.0))
      if rel.max() > _SYM_TOL:
        raise ValueError("Q is not symmetric")
    if m:
      row_nnz = np.diff(sp.csr_matrix(abs(self.A) > 0).indptr)
      empty = np.flatnonzero(row_nnz == 0)
      if empty.size:
        raise ValueError(f"A has empty rows: {empty.tolist()}")


@dataclasses.dataclass
class RawProblem:
  """An equality-constrained QP with general bounds ``lower <= x <= upper``.

  Inequality rows of the source file have already been turned into equalities
  with slack columns; ``row_slack`` remembers which (row -> (column, sign)) so
  that the problem can be written back in its original form. Columns
  ``[0, num_structural)`` are the ones declared in the file.
  """

  Q: sp.csr_matrix
  A: sp.csr_matrix
  b: np.ndarray
  c: np.ndarray
  lower: np.ndarray
  upper: np.ndarray
  name: str = ""
  obj_offset: float = 0.0
  row_names: list[str] = dataclasses.field(default_factory=list)
  col_names: list[str] = dataclasses.field(default_factory=list)
  num_structural: int | None = None
  row_slack: dict[int, tuple[int, int]] = dataclasses.field(default_factory=dict)

  def __post_init__(self):
    self.Q = sp.csr_matrix(self.Q, dtype=float)
    self.A = sp.csr_matrix(self.A, dtype=float)
    self.b = np.asarray(self.b, dtype=float).reshape(-1)
    self.c = np.asarray(self.c, dtype=float).reshape(-1)
    self.lower = np.asarray(self.lower, dtype=float).reshape(-1)
    self.upper = np.asarray(self.upper, dtype=float).reshape(-1)
    if self.num_structural is None:
      self.num_structural = self.n

  @property
  def n(self) -> int:
    return self.c.shape[0]

  @property
  def m(self) -> int:
    return self.b.shape[0]

  def objective(self, x: np.ndarray) -> float:
    return float(self.c @ x + 0.5 * x @ (self.Q @ x) + self.obj_offset)

  @classmethod
  def from_qp(cls, qp: QuadraticProgram) -> "RawProblem":
    return cls(qp.Q, qp.A, qp.b, qp.c, np.zeros(qp.n), np.full(qp.n, np.inf),
               name=qp.name)


@dataclasses.dataclass
class TransformRecord:
  """How a :class:`RawProblem` maps onto its standard form.

  Original variables are ``x = D @ xs + shifts`` where ``D`` has one entry per
  shifted/negated column and two for a split free variable. ``slack_map``
  pairs each original column having a finite upper bound with the index of
  its standard-form slack. Fixed variables are removed and stored in
  ``fixed``.
  """

  n_orig: int
  n_std: int
  m_orig: int
  m_std: int
  shifts: np.ndarray
  D: sp.csr_matrix
  slack_map: list[tuple[int, int]]
  fixed: dict[int, float]
  objective_offset: float
  widths: dict[int, float] = dataclasses.field(default_factory=dict)

  @property
  def is_identity(self) -> bool:
    return (not self.slack_map and not self.fixed and self.n_orig == self.n_std
            and not np.any(self.shifts)
            and (self.D != sp.identity(self.n_orig, format="csr")).nnz == 0)


@dataclasses.dataclass
class RecoveredSolution:
  x: np.ndarray
  lam: np.ndarray
  z: np.ndarray
  objective: float


# ---------------------------------------------------------------------------
# Parsing


def _float(tok: str, lineno: int) -> float:
  try:
    return float(tok)
  except ValueError:
    raise QpsParseError(lineno, f"expected a number, got {tok!r}") from None


def _pairs(tokens: list[str], lineno: int) -> list[tuple[str, str]]:
  if len(tokens) not in (2, 4):
    raise QpsParseError(lineno, f"expected 1 or 2 (name, value) pairs, got {tokens}")
  return [(tokens[0], tokens[1])] + ([(tokens[2], tokens[3])] if len(tokens) == 4 else [])


def _strip_set_name(tokens: list[str]) -> list[str]:
  # RHS/RANGES lines: an optional set name precedes the (row, value) pairs.
  return tokens[1:] if len(tokens) % 2 == 1 else tokens


def parse_qps(text: str | TextIO) -> RawProblem:
  """Parses fixed- or free-format MPS with optional QUADOBJ/QMATRIX.

  Fields are split on whitespace, so names may not contain spaces. The
  objective is always minimized; QUADOBJ/QSECTION list the lower triangle of
  Q, QMATRIX lists every entry. L/G rows (and ranged rows) receive a slack
  column named ``<row>_slack`` appended after the structural columns.
  """
  if isinstance(text, str):
    stream: Iterable[str] = io.StringIO(text)
  else:
    stream = text

  name = ""
  obj_row = None
  row_kind: dict[str, str] = {}
  row_order: list[str] = []
  col_index: dict[str, int] = {}
  entries: dict[tuple[str, int], float] = {}
  rhs: dict[str, float] = {}
  ranges: dict[str, float] = {}
  bounds: list[tuple[str, int, float, int]] = []
  quad: dict[tuple[int, int], float] = {}
  section = None
  seen_rows = seen_cols = seen_rhs = False
  ended = False

  for lineno, line in enumerate(stream, start=1):
    stripped = line.strip()
    if not stripped or stripped.startswith("*"):
      continue
    tokens = stripped.split()
    if not line[0].isspace():
      head = tokens[0].upper()
      if head not in _SECTIONS:
        raise QpsParseError(lineno, f"unknown section header {tokens[0]!r}")
      section = head
      if head == "NAME":
        name = tokens[1] if len(tokens) > 1 else ""
      elif head == "ROWS":
        seen_rows = True
      elif head == "COLUMNS":
        seen_cols = True
      elif head == "RHS":
        seen_rhs = True
      elif head == "OBJSENSE":
        raise QpsParseError(lineno, "OBJSENSE records are not supported")
      elif head == "ENDATA":
        ended = True
        break
      continue

    if section == "ROWS":
      if len(tokens) != 2:
        raise QpsParseError(lineno, "ROWS entries need a type and a name")
      kind, rname = tokens[0].upper(), tokens[1]
      if kind not in ("N", "E", "L", "G"):
        raise QpsParseError(lineno, f"unknown row type {kind!r}")
      if rname in row_kind:
        raise QpsParseError(lineno, f"duplicate row {rname!r}")
      if kind == "N":
        if obj_row is None:
          obj_row = rname
        row_kind[rname] = "N"
        continue
      row_kind[rname] = kind
      row_order.append(rname)

    elif section == "COLUMNS":
      if "'MARKER'" in tokens:
        raise QpsParseError(lineno, "integer markers are not supported")
      cname, rest = tokens[0], tokens[1:]
      j = col_index.setdefault(cname, len(col_index))
      for rname, val in _pairs(rest, lineno):
        if rname not in row_kind:
          raise QpsParseError(lineno, f"unknown row {rname!r}")
        if row_kind[rname] == "N" and rname != obj_row:
          continue
        if (rname, j) in entries:
          raise QpsParseError(lineno, f"duplicate entry for column {cname!r}, row {rname!r}")
        entries[(rname, j)] = _float(val, lineno)

    elif section in ("RHS", "RANGES"):
      target = rhs if section == "RHS" else ranges
      for rname, val in _pairs(_strip_set_name(tokens), lineno):
        if rname not in row_kind:
          raise QpsParseError(lineno, f"unknown row {rname!r}")
        if section == "RANGES" and row_kind[rname] == "N":
          raise QpsParseError(lineno, "RANGES on the objective row")
        if rname in target:
          raise QpsParseError(lineno, f"duplicate {section} entry for row {rname!r}")
        target[rname] = _float(val, lineno)

    elif section == "BOUNDS":
      kind = tokens[0].upper()
      no_value = kind in ("FR", "MI", "PL", "BV")
      args = tokens[1:]
      want = 1 if no_value else 2
      if len(args) == want + 1:
        args = args[1:]
      if len(args) != want:
        raise QpsParseError(lineno, f"malformed bound record {stripped!r}")
      cname = args[0]
      if cname not in col_index:
        raise QpsParseError(lineno, f"unknown column {cname!r}")
      if kind not in ("UP", "LO", "FX", "FR", "MI", "PL"):
        raise QpsParseError(lineno, f"unsupported bound type {kind!r}")
      val = 0.0 if no_value else _float(args[1], lineno)
      bounds.append((kind, col_index[cname], val, lineno))

    elif section in ("QUADOBJ", "QMATRIX", "QSECTION"):
      if len(tokens) != 3:
        raise QpsParseError(lineno, "quadratic entries need two columns and a value")
      for cname in tokens[:2]:
        if cname not in col_index:
          raise QpsParseError(lineno, f"unknown column {cname!r}")
      i, j = col_index[tokens[0]], col_index[tokens[1]]
      val = _float(tokens[2], lineno)
      if section == "QMATRIX":
        if (i, j) in quad:
          raise QpsParseError(lineno, "duplicate QMATRIX entry")
        quad[(i, j)] = val
      else:
        key = (max(i, j), min(i, j))
        if key in quad:
          raise QpsParseError(lineno, "duplicate QUADOBJ entry")
        quad[key] = val
        if i != j:
          quad[(key[1], key[0])] = val
    else:
      raise QpsParseError(lineno, "data line outside of any section")

  if not (seen_rows and seen_cols and seen_rhs):
    raise QpsParseError(0, "ROWS, COLUMNS and RHS sections are required")
  if not ended:
    raise QpsParseError(0, "missing ENDATA")

  n_struct = len(col_index)
  row_pos = {r: i for i, r in enumerate(row_order)}
  m = len(row_order)
  c = np.zeros(n_struct)
  rows, cols, vals = [], [], []
  for (rname, j), v in entries.items():
    if rname == obj_row:
      c[j] = v
    else:
      rows.append(row_pos[rname])
      cols.append(j)
      vals.append(v)
  b = np.array([rhs.get(r, 0.0) for r in row_order])
  obj_offset = -rhs.get(obj_row, 0.0) if obj_row is not None else 0.0

  lower = np.zeros(n_struct)
  upper = np.full(n_struct, np.inf)
  for kind, j, val, lineno in bounds:
    if kind == "UP":
      upper[j] = val
      if val < 0 and lower[j] == 0:
        lower[j] = -np.inf
    elif kind == "LO":
      lower[j] = val
    elif kind == "FX":
      lower[j] = upper[j] = val
    elif kind == "FR":
      lower[j], upper[j] = -np.inf, np.inf
    elif kind == "MI":
      lower[j] = -np.inf
    elif kind == "PL":
      upper[j] = np.inf

  # Inequality and ranged rows become equalities with a bounded slack.
  col_names = sorted(col_index, key=col_index.get)
  slack_lower, slack_upper = [], []
  row_slack: dict[int, tuple[int, int]] = {}
  for i, rname in enumerate(row_order):
    kind = row_kind[rname]
    rng = ranges.get(rname)
    if kind == "E" and rng is None:
      continue
    if kind == "L":
      sign = 1
    elif kind == "G":
      sign = -1
    else:
      sign = -1 if rng > 0 else 1
    width = np.inf if rng is None else abs(rng)
    j = n_struct + len(slack_lower)
    rows.append(i)
    cols.append(j)
    vals.append(float(sign))
    slack_lower.append(0.0)
    slack_upper.append(width)
    col_names.append(f"{rname}_slack")
    row_slack[i] = (j, sign)

  n = n_struct + len(slack_lower)
  A = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
  if quad:
    qi, qj = zip(*quad)
    Q = sp.csr_matrix((list(quad.values()), (qi, qj)), shape=(n, n))
  else:
    Q = sp.csr_matrix((n, n))
  return RawProblem(
      Q=Q, A=A, b=b, c=np.concatenate([c, np.zeros(len(slack_lower))]),
      lower=np.concatenate([lower, slack_lower]),
      upper=np.concatenate([upper, slack_upper]),
      name=name, obj_offset=obj_offset, row_names=list(row_order),
      col_names=col_names, num_structural=n_struct, row_slack=row_slack)


def read_qps(path: str | Path) -> RawProblem:
  with open(path) as f:
    return parse_qps(f)


def _fmt(v: float) -> str:
  return repr(float(v))


def write_qps(raw: RawProblem) -> str:
  """Writes ``raw`` as free-format MPS that :func:`parse_qps` reads back."""
  n_struct = raw.num_structural
  row_names = raw.row_names or [f"R{i}" for i in range(raw.m)]
  col_names = raw.col_names or [f"C{j}" for j in range(raw.n)]
  slack_cols = {j for j, _ in raw.row_slack.values()}
  if any(j < n_struct for j in slack_cols) or len(slack_cols) != raw.n - n_struct:
    raise ValueError("every non-structural column must be a row slack")

  out = [f"NAME {raw.name or 'UNNAMED'}", "ROWS", " N  OBJ"]
  for i, r in enumerate(row_names):
    kind = "E"
    if i in raw.row_slack:
      kind = "L" if raw.row_slack[i][1] > 0 else "G"
    out.append(f" {kind}  {r}")
  out.append("COLUMNS")
  A = sp.csc_matrix(raw.A)
  for j in range(n_struct):
    col = A[:, j]
    if raw.c[j] != 0:
      out.append(f"    {col_names[j]}  OBJ  {_fmt(raw.c[j])}")
    for i, v in zip(col.indices, col.data):
      if v != 0:
        out.append(f"    {col_names[j]}  {row_names[i]}  {_fmt(v)}")
    if raw.c[j] == 0 and not np.any(col.data):
      out.append(f"    {col_names[j]}  OBJ  0.0")
  out.append("RHS")
  for i, r in enumerate(row_names):
    if raw.b[i] != 0:
      out.append(f"    RHS  {r}  {_fmt(raw.b[i])}")
  if raw.obj_offset:
    out.append(f"    RHS  OBJ  {_fmt(-raw.obj_offset)}")
  range_lines = []
  for i, (j, _) in sorted(raw.row_slack.items()):
    if math.isfinite(raw.upper[j]):
      range_lines.append(f"    RNG  {row_names[i]}  {_fmt(raw.upper[j])}")
  if range_lines:
    out.append("RANGES")
    out.extend(range_lines)
  bound_lines = []
  for j in range(n_struct):
    lo, up, cn = raw.lower[j], raw.upper[j], col_names[j]
    if lo == up:
      bound_lines.append(f" FX BND  {cn}  {_fmt(lo)}")
      continue
    if lo == -np.inf and up == np.inf:
      bound_lines.append(f" FR BND  {cn}")
      continue
    if lo == -np.inf:
      bound_lines.append(f" MI BND  {cn}")
    elif lo != 0:
      bound_lines.append(f" LO BND  {cn}  {_fmt(lo)}")
    if up != np.inf:
      bound_lines.append(f" UP BND  {cn}  {_fmt(up)}")
  if bound_lines:
    out.append("BOUNDS")
    out.extend(bound_lines)
  Qc = sp.coo_matrix(sp.tril(raw.Q))
  if Qc.nnz:
    out.append("QUADOBJ")
    for i, j, v in sorted(zip(Qc.row, Qc.col, Qc.data), key=lambda t: (t[1], t[0])):
      if v != 0:
        out.append(f"    {col_names[j]}  {col_names[i]}  {_fmt(v)}")
  out.append("ENDATA")
  return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Standard form


def to_standard_form(raw: RawProblem) -> tuple[QuadraticProgram, TransformRecord]:
  """Rewrites ``raw`` so that the only bounds are ``x >= 0``.

  Finite lower bounds are shifted out, variables with only an upper bound are
  negated, free variables are split into two nonnegative parts, fixed
  variables are eliminated, and each remaining finite upper bound gets its own
  row ``x' + t = u - l`` with a new slack ``t >= 0``.
  """
  n, m = raw.n, raw.m
  if n == 0:
    raise ValueError("problem has no variables")
  lo, up = raw.lower, raw.upper
  bad = np.flatnonzero(lo > up)
  if bad.size:
    raise InfeasibleBoundsError(f"lower > upper for variables {bad.tolist()}")

  d_rows, d_cols, d_vals = [], [], []
  shifts = np.zeros(n)
  fixed: dict[int, float] = {}
  ub_rows: list[tuple[int, int, float]] = []  # (orig var, std column, width)
  k = 0
  for j in range(n):
    l, u = lo[j], up[j]
    if l == u:
      fixed[j] = float(l)
      shifts[j] = l
    elif math.isfinite(l):
      shifts[j] = l
      d_rows.append(j); d_cols.append(k); d_vals.append(1.0)
      if math.isfinite(u):
        ub_rows.append((j, k, u - l))
      k += 1
    elif math.isfinite(u):
      shifts[j] = u
      d_rows.append(j); d_cols.append(k); d_vals.append(-1.0)
      k += 1
    else:
      d_rows += [j, j]; d_cols += [k, k + 1]; d_vals += [1.0, -1.0]
      k += 2
  n_vars = k
  n_std = n_vars + len(ub_rows)
  D = sp.csr_matrix((d_vals, (d_rows, d_cols)), shape=(n, n_std))
  D.sort_indices()

  h = shifts
  Qh = raw.Q @ h
  Q_std = sp.csr_matrix(D.T @ raw.Q @ D)
  c_std = D.T @ (raw.c + Qh)
  offset = float(raw.c @ h + 0.5 * h @ Qh)
  A_std = raw.A @ D
  b_std = raw.b - raw.A @ h

  slack_map = []
  if ub_rows:
    r, cidx, v = [], [], []
    for i, (j, col, width) in enumerate(ub_rows):
      r += [i, i]
      cidx += [col, n_vars + i]
      v += [1.0, 1.0]
      slack_map.append((j, n_vars + i))
    B = sp.csr_matrix((v, (r, cidx)), shape=(len(ub_rows), n_std))
    A_std = sp.vstack([A_std, B])
    b_std = np.concatenate([b_std, [w for _, _, w in ub_rows]])

  qp = QuadraticProgram(Q=Q_std, A=A_std, b=b_std, c=c_std, name=raw.name)
  qp.Q.eliminate_zeros()
  qp.A.eliminate_zeros()
  rec = TransformRecord(
      n_orig=n, n_std=n_std, m_orig=m, m_std=qp.m, shifts=shifts, D=D,
      slack_map=slack_map, fixed=fixed,
      objective_offset=offset + raw.obj_offset,
      widths={j: float(w) for j, _, w in ub_rows})
  return qp, rec


def transform_point(rec: TransformRecord, x: np.ndarray) -> np.ndarray:
  """Maps an original-space primal point to standard form."""
  x = np.asarray(x, dtype=float)
  if x.shape != (rec.n_orig,):
    raise ValueError(f"expected {rec.n_orig} original variables, got {x.shape}")
  xs = np.zeros(rec.n_std)
  D = rec.D
  diff = x - rec.shifts
  for j in range(rec.n_orig):
    cols = D.indices[D.indptr[j]:D.indptr[j + 1]]
    signs = D.data[D.indptr[j]:D.indptr[j + 1]]
    if len(cols) == 1:
      xs[cols[0]] = signs[0] * diff[j]
    elif len(cols) == 2:
      pos, neg = (cols[0], cols[1]) if signs[0] > 0 else (cols[1], cols[0])
      xs[pos], xs[neg] = max(diff[j], 0.0), max(-diff[j], 0.0)
  for j, t in rec.slack_map:
    col = D.indices[D.indptr[j]]
    xs[t] = rec.widths[j] - xs[col]
  return xs


def recover_solution(rec: TransformRecord, raw: RawProblem, x_std: np.ndarray,
                     lam_std: np.ndarray | None = None) -> RecoveredSolution:
  """Maps a standard-form point back to the variables of ``raw``.

  Slacks are dropped and shifts re-added. The reduced costs are recomputed in
  the original space as ``c + Qx - A'lam`` from the equality multipliers.
  """
  x_std = np.asarray(x_std, dtype=float)
  if x_std.shape != (rec.n_std,):
    raise ValueError(f"expected a point of length {rec.n_std}, got {x_std.shape}")
  if lam_std is not None:
    lam_std = np.asarray(lam_std, dtype=float)
    if lam_std.shape != (rec.m_std,):
      raise ValueError(f"expected {rec.m_std} multipliers, got {lam_std.shape}")
  x = rec.D @ x_std + rec.shifts
  lam = np.zeros(rec.m_orig) if lam_std is None else lam_std[:rec.m_orig]
  z = raw.c + raw.Q @ x - raw.A.T @ lam
  return RecoveredSolution(x=x, lam=lam, z=z, objective=raw.objective(x))
