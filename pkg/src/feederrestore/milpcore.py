"""Small MILP modelling layer and a pluggable solver backend.

Models are built row by row from sparse linear expressions and handed to a
backend as ``min/max c'x  s.t.  lb <= A x <= ub, x in bounds, some x integer``.
The default backend is HiGHS through :func:`scipy.optimize.milp`.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Union

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, LinearConstraint, milp

logger = logging.getLogger(__name__)

INF = math.inf
DEFAULT_GAP = 1e-6
ENV_BACKEND = "FEEDERRESTORE_SOLVER"
ENV_TIME_LIMIT = "FEEDERRESTORE_TIME_LIMIT"

# optimal / infeasible / time_limit / error
OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
TIME_LIMIT = "time_limit"
ERROR = "error"


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Var:
    index: int
    name: str

    def __add__(self, other):
        return LinExpr.of(self) + other

    __radd__ = __add__

    def __sub__(self, other):
        return LinExpr.of(self) - other

    def __rsub__(self, other):
        return (-1.0) * LinExpr.of(self) + other

    def __mul__(self, k):
        return LinExpr.of(self) * k

    __rmul__ = __mul__

    def __neg__(self):
        return LinExpr.of(self) * -1.0


class LinExpr:
    """Sparse affine expression ``sum(coef * var) + const``."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: Mapping[int, float] | None = None, const: float = 0.0):
        self.terms: dict[int, float] = dict(terms) if terms else {}
        self.const = float(const)

    @staticmethod
    def of(x: "Operand") -> "LinExpr":
        if isinstance(x, LinExpr):
            return x
        if isinstance(x, Var):
            return LinExpr({x.index: 1.0})
        return LinExpr(const=float(x))

    def copy(self) -> "LinExpr":
        return LinExpr(self.terms, self.const)

    def add_term(self, x: "Operand", k: float = 1.0) -> "LinExpr":
        """In-place ``self += k * x``."""
        if k == 0:
            return self
        if isinstance(x, Var):
            self.terms[x.index] = self.terms.get(x.index, 0.0) + k
        elif isinstance(x, LinExpr):
            for i, c in x.terms.items():
                self.terms[i] = self.terms.get(i, 0.0) + k * c
            self.const += k * x.const
        else:
            self.const += k * float(x)
        return self

    def __add__(self, other):
        return self.copy().add_term(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self.copy().add_term(other, -1.0)

    def __rsub__(self, other):
        return (self * -1.0).add_term(other, 1.0)

    def __mul__(self, k):
        k = float(k)
        return LinExpr({i: c * k for i, c in self.terms.items()}, self.const * k)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(c * x[i] for i, c in self.terms.items())

    def __repr__(self):
        return f"LinExpr({self.terms}, {self.const})"


Operand = Union[Var, LinExpr, float, int]


def lin_sum(items: Iterable[Operand]) -> LinExpr:
    out = LinExpr()
    for it in items:
        out.add_term(it)
    return out


@dataclass
class Constraint:
    index: int
    name: str


@dataclass
class MILPModel:
    """Container of variables, rows and objective.  Row order is insertion order."""

    name: str = "model"
    sense: str = "max"
    names: list[str] = field(default_factory=list)
    lo: list[float] = field(default_factory=list)
    hi: list[float] = field(default_factory=list)
    integer: list[bool] = field(default_factory=list)
    rows: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    row_lo: list[float] = field(default_factory=list)
    row_hi: list[float] = field(default_factory=list)
    row_names: list[str] = field(default_factory=list)
    objective: LinExpr = field(default_factory=LinExpr)
    _by_name: dict[str, Var] = field(default_factory=dict)

    # variables ----------------------------------------------------------
    def add_var(self, name: str, lo: float = 0.0, hi: float = INF, binary: bool = False,
                integer: bool = False) -> Var:
        if name in self._by_name:
            raise ValueError(f"duplicate variable name {name!r}")
        if binary:
            lo, hi = max(lo, 0.0), min(hi, 1.0)
            integer = True
        if lo > hi:
            raise ValueError(f"variable {name!r} has empty bounds [{lo}, {hi}]")
        v = Var(len(self.names), name)
        self.names.append(name)
        self.lo.append(float(lo))
        self.hi.append(float(hi))
        self.integer.append(integer)
        self._by_name[name] = v
        return v

    def add_binary(self, name: str) -> Var:
        return self.add_var(name, 0.0, 1.0, binary=True)

    def var(self, name: str) -> Var:
        return self._by_name[name]

    def has_var(self, name: str) -> bool:
        return name in self._by_name

    def is_binary(self, v: Var) -> bool:
        return self.integer[v.index] and self.lo[v.index] >= 0 and self.hi[v.index] <= 1

    def bounds_of(self, v: Var) -> tuple[float, float]:
        return self.lo[v.index], self.hi[v.index]

    @property
    def n_vars(self) -> int:
        return len(self.names)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    # constraints --------------------------------------------------------
    def add_constr(self, lhs: Operand, sense: str, rhs: Operand = 0.0, name: str = "") -> Constraint:
        """Add ``lhs (<=|==|>=) rhs``; both sides may be expressions."""
        expr = LinExpr.of(lhs) - rhs
        idx = np.fromiter(expr.terms.keys(), dtype=np.int64, count=len(expr.terms))
        val = np.fromiter(expr.terms.values(), dtype=float, count=len(expr.terms))
        keep = val != 0
        idx, val = idx[keep], val[keep]
        order = np.argsort(idx, kind="stable")
        idx, val = idx[order], val[order]
        b = -expr.const
        if sense == "<=":
            lo, hi = -INF, b
        elif sense == ">=":
            lo, hi = b, INF
        elif sense in ("==", "="):
            lo = hi = b
        else:
            raise ValueError(f"unknown relation {sense!r}")
        if idx.size == 0:
            if lo - 1e-9 > 0 or hi + 1e-9 < 0:
                raise ValueError(f"constant constraint {name!r} is infeasible ({lo} <= 0 <= {hi})")
        self.rows.append((idx, val))
        self.row_lo.append(lo)
        self.row_hi.append(hi)
        self.row_names.append(name or f"c{len(self.rows) - 1}")
        return Constraint(len(self.rows) - 1, self.row_names[-1])

    def set_objective(self, expr: Operand, sense: str = "max") -> None:
        if sense not in ("max", "min"):
            raise ValueError("sense must be 'max' or 'min'")
        self.objective = LinExpr.of(expr).copy()
        self.sense = sense

    # export ---------------------------------------------------------------
    def matrix(self) -> sp.csr_matrix:
        indptr = np.zeros(len(self.rows) + 1, dtype=np.int64)
        for k, (idx, _) in enumerate(self.rows):
            indptr[k + 1] = indptr[k] + idx.size
        if self.rows:
            indices = np.concatenate([r[0] for r in self.rows])
            data = np.concatenate([r[1] for r in self.rows])
        else:
            indices = np.zeros(0, dtype=np.int64)
            data = np.zeros(0)
        return sp.csr_matrix((data, indices, indptr), shape=(len(self.rows), self.n_vars))

    def cost_vector(self) -> np.ndarray:
        c = np.zeros(self.n_vars)
        for i, k in self.objective.terms.items():
            c[i] += k
        return c

    def canonical_hash(self) -> str:
        """Hash of the canonical form; identical inputs give identical hashes."""
        h = hashlib.sha256()
        h.update(self.sense.encode())
        h.update("\0".join(self.names).encode())
        for arr in (self.lo, self.hi, self.row_lo, self.row_hi):
            h.update(np.asarray(arr, dtype=float).tobytes())
        h.update(np.asarray(self.integer, dtype=bool).tobytes())
        for idx, val in self.rows:
            h.update(idx.tobytes())
            h.update(val.tobytes())
            h.update(b"|")
        h.update(self.cost_vector().tobytes())
        h.update(np.float64(self.objective.const).tobytes())
        return h.hexdigest()

    def write_lp(self, path: str | Path) -> None:
        """Write the model in CPLEX LP text format."""
        def term_str(idx, val):
            parts = []
            for i, c in zip(idx, val):
                sign = "-" if c < 0 else "+"
                parts.append(f"{sign} {abs(c):.12g} {_lp_name(self.names[i])}")
            return " ".join(parts) if parts else "0 " + _lp_name(self.names[0])

        c = self.cost_vector()
        nz = np.nonzero(c)[0]
        with open(path, "w") as fh:
            fh.write(f"\\ {self.name}\n")
            fh.write("Maximize\n" if self.sense == "max" else "Minimize\n")
            fh.write(f" obj: {term_str(nz, c[nz])}\n")
            fh.write("Subject To\n")
            for k, (idx, val) in enumerate(self.rows):
                lo, hi = self.row_lo[k], self.row_hi[k]
                name = _lp_name(self.row_names[k])
                body = term_str(idx, val)
                if lo == hi:
                    fh.write(f" {name}: {body} = {hi:.12g}\n")
                else:
                    if hi < INF:
                        fh.write(f" {name}_u: {body} <= {hi:.12g}\n")
                    if lo > -INF:
                        fh.write(f" {name}_l: {body} >= {lo:.12g}\n")
            fh.write("Bounds\n")
            for i, n in enumerate(self.names):
                lo, hi = self.lo[i], self.hi[i]
                lo_s = "-inf" if lo == -INF else f"{lo:.12g}"
                hi_s = "+inf" if hi == INF else f"{hi:.12g}"
                fh.write(f" {lo_s} <= {_lp_name(n)} <= {hi_s}\n")
            ints = [i for i in range(self.n_vars) if self.integer[i]]
            if ints:
                fh.write("General\n")
                for i in ints:
                    fh.write(f" {_lp_name(self.names[i])}\n")
            fh.write("End\n")


def _lp_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "_." else "_" for ch in name)


@dataclass
class SolveOptions:
    time_limit: float | None = None
    gap: float = DEFAULT_GAP
    threads: int = 1
    verbose: bool = False

    @classmethod
    def from_env(cls, **overrides) -> "SolveOptions":
        opts = cls(**overrides)
        if opts.time_limit is None and os.environ.get(ENV_TIME_LIMIT):
            opts.time_limit = float(os.environ[ENV_TIME_LIMIT])
        return opts


@dataclass
class SolveResult:
    status: str
    objective: float | None
    x: np.ndarray | None
    wall_time: float
    gap: float | None = None
    message: str = ""
    backend: str = ""

    @property
    def has_solution(self) -> bool:
        return self.x is not None

    def value(self, v: Operand) -> float:
        if self.x is None:
            raise SolverError(f"no solution available (status {self.status})")
        if isinstance(v, Var):
            return float(self.x[v.index])
        return LinExpr.of(v).value(self.x)


class HighsBackend:
    """HiGHS via ``scipy.optimize.milp``.

    Each call creates its own HiGHS instance, but calls are serialised with a
    lock because the shared library is not documented as re-entrant.
    """

    name = "highs"
    _lock = threading.Lock()

    def solve(self, model: MILPModel, options: SolveOptions) -> SolveResult:
        c = model.cost_vector()
        if model.sense == "max":
            c = -c
        A = model.matrix()
        constraints = [LinearConstraint(A, np.array(model.row_lo), np.array(model.row_hi))] if model.n_rows else []
        milp_opts: dict = {"disp": options.verbose, "mip_rel_gap": options.gap, "presolve": True}
        if options.time_limit is not None:
            milp_opts["time_limit"] = float(options.time_limit)
        t0 = time.perf_counter()
        with self._lock:
            res = milp(c, integrality=np.asarray(model.integer, dtype=int),
                       bounds=Bounds(np.array(model.lo), np.array(model.hi)),
                       constraints=constraints, options=milp_opts)
        wall = time.perf_counter() - t0
        x = None if res.x is None else np.asarray(res.x)
        if x is not None:
            ints = np.asarray(model.integer)
            x = x.copy()
            x[ints] = np.round(x[ints])
        if res.status == 0:
            status = OPTIMAL
        elif res.status == 1:
            status = TIME_LIMIT
        elif res.status == 2:
            status = INFEASIBLE
            x = None
        else:
            status = ERROR
        obj = None
        if x is not None:
            obj = float(model.cost_vector() @ x + model.objective.const)
        gap = getattr(res, "mip_gap", None)
        return SolveResult(status, obj, x, wall, gap=gap, message=str(res.message), backend=self.name)


_BACKENDS = {"highs": HighsBackend}


def get_backend(name: str | None = None):
    name = (name or os.environ.get(ENV_BACKEND) or "highs").lower()
    try:
        return _BACKENDS[name]()
    except KeyError:
        raise SolverError(f"MILP backend {name!r} is not available; choose from {sorted(_BACKENDS)}") from None


def solve(model: MILPModel, options: SolveOptions | None = None, backend: str | None = None) -> SolveResult:
    """Solve ``model`` with the configured backend."""
    options = options or SolveOptions.from_env()
    be = get_backend(backend)
    logger.debug("solving %s: %d vars (%d int), %d rows", model.name, model.n_vars,
                 sum(model.integer), model.n_rows)
    try:
        result = be.solve(model, options)
    except Exception as exc:  # backend crash -> diagnostic result
        raise SolverError(f"{be.name} failed on {model.name}: {exc}") from exc
    logger.debug("%s: %s obj=%s in %.2fs", model.name, result.status, result.objective, result.wall_time)
    return result


# ---------------------------------------------------------------------------
# modelling helpers

def linearize_product_bin_cont(model: MILPModel, x: Var, y: Operand, z: Operand,
                               y_lo: float | None = None, y_hi: float | None = None,
                               name: str = "") -> list[Constraint]:
    """Constrain ``z == x * y`` for binary ``x`` and bounded ``y``.

    Emits ``x*y_lo <= z <= x*y_hi`` and ``y + (x-1)*y_hi <= z <= y + (x-1)*y_lo``.
    ``y`` and ``z`` may be variables or affine expressions; for a plain variable
    the bounds default to its own.
    """
    if y_lo is None or y_hi is None:
        if not isinstance(y, Var):
            raise ValueError("bounds are required when y is an expression")
        lo, hi = model.bounds_of(y)
        y_lo = lo if y_lo is None else y_lo
        y_hi = hi if y_hi is None else y_hi
    if not (math.isfinite(y_lo) and math.isfinite(y_hi)):
        raise ValueError(f"linearize {name or 'product'}: y must have finite bounds, got [{y_lo}, {y_hi}]")
    zx = LinExpr.of(z)
    yx = LinExpr.of(y)
    p = name or f"bm{model.n_rows}"
    return [
        model.add_constr(zx, ">=", x * y_lo, f"{p}_a"),
        model.add_constr(zx, "<=", x * y_hi, f"{p}_b"),
        model.add_constr(zx, ">=", yx + (x - 1.0) * y_hi, f"{p}_c"),
        model.add_constr(zx, "<=", yx + (x - 1.0) * y_lo, f"{p}_d"),
    ]


def polygon_scale(n: int = 6) -> float:
    """Ratio of the polygon circumradius to the rated apparent power."""
    return math.sqrt((2 * math.pi / n) / math.sin(2 * math.pi / n))


def hexagon_halfplanes(s_rated: float) -> list[tuple[float, float, float]]:
    """Hexagon as rows ``(a, b, c)`` meaning ``a*P + b*Q <= c``."""
    s = s_rated * polygon_scale(6)
    r3 = math.sqrt(3.0)
    return [
        (-r3, -1.0, r3 * s),     # -sqrt3 (P + S) <= Q
        (r3, 1.0, r3 * s),       # Q <= -sqrt3 (P - S)
        (0.0, -1.0, r3 / 2 * s),  # -sqrt3/2 S <= Q
        (0.0, 1.0, r3 / 2 * s),   # Q <= sqrt3/2 S
        (r3, -1.0, r3 * s),      # sqrt3 (P - S) <= Q
        (-r3, 1.0, r3 * s),      # Q <= sqrt3 (P + S)
    ]


def in_hexagon(p: float, q: float, s_rated: float, tol: float = 1e-9) -> bool:
    return all(a * p + b * q <= c + tol for a, b, c in hexagon_halfplanes(s_rated))


def polygon_thermal_constraints(model: MILPModel, P: Operand, Q: Operand, s_rated: float,
                                name: str = "") -> list[Constraint]:
    """Six half-planes of the hexagonal apparent-power limit for one phase."""
    if s_rated <= 0:
        raise ValueError("s_rated must be positive")
    p = name or f"hex{model.n_rows}"
    out = []
    for k, (a, b, c) in enumerate(hexagon_halfplanes(s_rated)):
        out.append(model.add_constr(LinExpr.of(P) * a + LinExpr.of(Q) * b, "<=", c, f"{p}_{k}"))
    return out
