"""Conic solver contract: affine-LMI minimization with certified results.

A request carries an objective vector, PSD constraints of the form
B0 + sum_v x_v A_v >= 0, and scalar lower bounds.  The adapter translates
this into the cone program

    minimize c^T x  s.t.  h - G x in K,   K = R_+^l x PSD^{d_1} x ...

and drives a primal-dual interior point method through a small ladder of
numerical settings.  A result is reported optimal only if the returned
primal-dual pair itself passes an independent audit (primal cone
violation, dual cone violation and complementarity gap), so downstream
certificate checks never see an uncertified point.  Infeasibility is
reported only when the dual improving ray passes the audit of its
defining inequalities.
"""

from __future__ import annotations

import dataclasses
import os
import time

import numpy as np
from cvxopt import matrix as _cvx_matrix
from cvxopt import solvers as _cvx_solvers

# Acceptance contract for results reported optimal.
PVIOL_MAX = 1e-7   # max primal cone violation, relative to 1 + max|h|
DVIOL_MAX = 1e-7   # max dual cone violation, absolute
RELGAP_MAX = 1e-7  # |s.z| / (1 + |objective|)

# Farkas certificate quality required to report infeasibility.
FARKAS_TOL = 1e-6

# Settings ladder: refinement steps, KKT factorization, and for the last
# rung slightly relaxed interior-point stopping tolerances.  The audit
# gate above is identical on every rung.
_LADDER = (
    {"refinement": 1, "kktsolver": "chol", "relaxed": False},
    {"refinement": 2, "kktsolver": "chol", "relaxed": False},
    {"refinement": 3, "kktsolver": "ldl", "relaxed": False},
    {"refinement": 1, "kktsolver": "chol", "relaxed": True},
)
_RELAXED = {"feastol": 1e-7, "abstol": 1e-7, "reltol": 1e-6}

_STATUSES = ("optimal", "infeasible", "unbounded", "numerical_failure",
             "iteration_limit")


@dataclasses.dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 200
    feastol: float = 1e-8
    gaptol: float = 1e-8

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.feastol <= 0 or self.gaptol <= 0:
            raise ValueError("tolerances must be positive")


@dataclasses.dataclass(frozen=True)
class SolverRequest:
    """Immutable conic problem description.

    psd_blocks is a tuple of (B0, coeffs) pairs where coeffs maps variable
    index -> symmetric matrix; the constraint is B0 + sum x_v A_v >= 0.
    nonneg is a tuple of (variable index, lower bound) scalar constraints.
    """

    n_vars: int
    objective: np.ndarray
    psd_blocks: tuple
    nonneg: tuple = ()
    options: SolverOptions = SolverOptions()

    def __post_init__(self):
        if self.n_vars < 1:
            raise ValueError("n_vars must be >= 1")
        c = np.asarray(self.objective, dtype=float).reshape(-1)
        if c.shape != (self.n_vars,):
            raise ValueError(f"objective must have length {self.n_vars}")
        c.setflags(write=False)
        object.__setattr__(self, "objective", c)
        blocks = []
        for bi, (b0, coeffs) in enumerate(self.psd_blocks):
            b0 = np.atleast_2d(np.asarray(b0, dtype=float))
            d = b0.shape[0]
            if b0.shape != (d, d):
                raise ValueError(f"block {bi}: constant term must be square")
            _require_symmetric(b0, f"block {bi} constant term")
            clean = {}
            for v, a in coeffs.items():
                v = int(v)
                if not 0 <= v < self.n_vars:
                    raise ValueError(f"block {bi}: variable index {v} out of range")
                a = np.atleast_2d(np.asarray(a, dtype=float))
                if a.shape != (d, d):
                    raise ValueError(f"block {bi}: coefficient for variable {v} "
                                     f"must be {d}x{d}")
                _require_symmetric(a, f"block {bi} coefficient {v}")
                clean[v] = a
            blocks.append((b0, clean))
        object.__setattr__(self, "psd_blocks", tuple(blocks))
        nn = []
        for v, lb in self.nonneg:
            v = int(v)
            if not 0 <= v < self.n_vars:
                raise ValueError(f"nonneg: variable index {v} out of range")
            nn.append((v, float(lb)))
        object.__setattr__(self, "nonneg", tuple(nn))


@dataclasses.dataclass(frozen=True)
class SolverResult:
    status: str
    x: np.ndarray | None
    objective: float | None
    solve_time: float
    iterations: int
    diagnostics: dict = dataclasses.field(default_factory=dict)
    certificate: np.ndarray | None = None

    def __post_init__(self):
        if self.status not in _STATUSES:
            raise ValueError(f"unknown status {self.status!r}")


def _require_symmetric(m, what, rtol=1e-12):
    scale = max(1.0, float(np.abs(m).max()))
    if np.abs(m - m.T).max() > rtol * scale:
        raise ValueError(f"{what} must be symmetric")


def _column_scales(req: SolverRequest) -> np.ndarray:
    """Per-variable magnitude of the largest coefficient block eigenvalue.

    Used for an exact change of variables x_hat = s * x that equilibrates
    the cone matrix columns; the objective and the recovered solution are
    mapped back exactly, so certificates transfer unchanged.
    """
    s = np.zeros(req.n_vars)
    for _, coeffs in req.psd_blocks:
        for v, a in coeffs.items():
            s[v] = max(s[v], float(np.abs(np.linalg.eigvalsh(a)).max()))
    s[s == 0.0] = 1.0
    return np.clip(s, 1e-8, 1e8)


def _build_cone(req: SolverRequest):
    """Assemble (c, G, h, dims) in the scaled variables."""
    scales = _column_scales(req)
    n = req.n_vars
    rows_g, rows_h = [], []
    dims = {"l": len(req.nonneg), "q": [], "s": []}
    for v, lb in req.nonneg:
        r = np.zeros(n)
        r[v] = -1.0 / scales[v]
        rows_g.append(r.reshape(1, -1))
        rows_h.append(np.array([-lb]))
    for b0, coeffs in req.psd_blocks:
        d = b0.shape[0]
        gb = np.zeros((d * d, n))
        for v, a in coeffs.items():
            gb[:, v] = -(a / scales[v]).reshape(-1, order="F")
        rows_g.append(gb)
        rows_h.append(b0.reshape(-1, order="F"))
        dims["s"].append(d)
    c = req.objective / scales
    if rows_g:
        g = np.vstack(rows_g)
        h = np.concatenate(rows_h)
    else:
        g = np.zeros((0, n))
        h = np.zeros(0)
    return c, g, h, dims, scales


def _cone_violation(vec, dims):
    """Largest violation of cone membership, per block, absolute."""
    worst = 0.0
    off = dims["l"]
    if off:
        worst = max(worst, -min(0.0, float(vec[:off].min())))
    for d in dims["s"]:
        m = vec[off:off + d * d].reshape(d, d, order="F")
        w = np.linalg.eigvalsh(0.5 * (m + m.T))
        worst = max(worst, -min(0.0, float(w[0])))
        off += d * d
    return worst


def _audit(c, g, h, dims, x, z):
    s = h - g @ x
    pobj = float(c @ x)
    return {
        "pviol": _cone_violation(s, dims) / (1.0 + (np.abs(h).max() if h.size else 0.0)),
        "dviol": _cone_violation(z, dims),
        "relgap": abs(float(s @ z)) / (1.0 + abs(pobj)),
        "dres": float(np.abs(g.T @ z + c).max()) / (1.0 + (np.abs(z).max() if z.size else 0.0)),
        "objective_scaled": pobj,
    }


def solve(req: SolverRequest) -> SolverResult:
    """Solve the request; never raises on numerical trouble.

    Reported optimal only when the returned primal-dual pair passes the
    audit gate (PVIOL_MAX, DVIOL_MAX, RELGAP_MAX).  Reported infeasible
    only with a Farkas ray z satisfying h^T z < 0 and ||G^T z|| small
    relative to |h^T z|.  An exhausted ladder yields iteration_limit when
    any attempt ran out of iterations, else numerical_failure.
    """
    t_start = time.perf_counter()
    opts = req.options
    c, g, h, dims, scales = _build_cone(req)

    if g.shape[0] == 0:
        # Unconstrained: optimal iff the objective is identically zero.
        elapsed = time.perf_counter() - t_start
        if np.all(req.objective == 0.0):
            return SolverResult("optimal", np.zeros(req.n_vars), 0.0, elapsed, 0,
                                {"note": "no constraints"})
        return SolverResult("unbounded", None, None, elapsed, 0,
                            {"note": "no constraints, nonzero objective"})

    cm, gm, hm = _cvx_matrix(c), _cvx_matrix(g), _cvx_matrix(h)
    hit_limit = False
    total_iters = 0
    last_diag = {}
    for rung, cfg in enumerate(_LADDER):
        conf = {
            "show_progress": False,
            "maxiters": opts.max_iters,
            "feastol": _RELAXED["feastol"] if cfg["relaxed"] else opts.feastol,
            "abstol": _RELAXED["abstol"] if cfg["relaxed"] else opts.gaptol,
            "reltol": _RELAXED["reltol"] if cfg["relaxed"] else opts.gaptol,
            "refinement": cfg["refinement"],
        }
        try:
            sol = _cvx_solvers.conelp(cm, gm, hm, dims,
                                      kktsolver=cfg["kktsolver"], options=conf)
        except (ZeroDivisionError, ArithmeticError, ValueError):
            continue
        iters = int(sol.get("iterations", 0))
        total_iters += iters
        if iters >= opts.max_iters:
            hit_limit = True

        if sol["status"] == "primal infeasible" and sol["z"] is not None:
            z = np.asarray(sol["z"]).reshape(-1)
            hz = float(h @ z)
            gtz = float(np.abs(g.T @ z).max())
            if hz < 0 and gtz / max(1.0, -hz) <= FARKAS_TOL \
                    and _cone_violation(z, dims) <= FARKAS_TOL:
                elapsed = time.perf_counter() - t_start
                return SolverResult(
                    "infeasible", None, None, elapsed, total_iters,
                    {"farkas_hz": hz, "farkas_gtz": gtz, "rung": rung},
                    certificate=z)
            continue
        if sol["status"] == "dual infeasible" and sol["x"] is not None:
            xr = np.asarray(sol["x"]).reshape(-1)
            cx = float(c @ xr)
            ray_viol = _cone_violation(-(g @ xr), dims)
            if cx <= -0.5 and ray_viol <= FARKAS_TOL:
                elapsed = time.perf_counter() - t_start
                return SolverResult(
                    "unbounded", None, None, elapsed, total_iters,
                    {"ray_cx": cx, "ray_violation": ray_viol, "rung": rung},
                    certificate=xr / scales)
            continue
        if sol["x"] is None or sol["z"] is None:
            continue
        x_hat = np.asarray(sol["x"]).reshape(-1)
        z = np.asarray(sol["z"]).reshape(-1)
        diag = _audit(c, g, h, dims, x_hat, z)
        diag["rung"] = rung
        last_diag = diag
        if diag["pviol"] <= PVIOL_MAX and diag["dviol"] <= DVIOL_MAX \
                and diag["relgap"] <= RELGAP_MAX:
            x = x_hat / scales
            elapsed = time.perf_counter() - t_start
            return SolverResult("optimal", x, float(req.objective @ x),
                                elapsed, total_iters, diag)

    elapsed = time.perf_counter() - t_start
    status = "iteration_limit" if hit_limit else "numerical_failure"
    return SolverResult(status, None, None, elapsed, total_iters, last_diag)


def _fmt(v: float) -> str:
    return repr(float(v))


def export_request(req: SolverRequest, path: str) -> None:
    """Write the request in sparse block-diagonal SDP text form.

    Layout: variable count, block count, block sizes (diagonal block
    negative), objective row, then quintuples `matno blkno i j value` with
    matno 0 holding the constant matrix F0 and matno v the coefficient of
    variable v, upper triangle only, 1-based indices, exact decimal
    values.  The encoded problem is min c^T x s.t. sum_v x_v F_v - F0 >= 0
    per block; scalar bounds become a trailing diagonal block.
    """
    lines = [str(req.n_vars)]
    sizes = [b0.shape[0] for b0, _ in req.psd_blocks]
    nblocks = len(sizes) + (1 if req.nonneg else 0)
    lines.append(str(nblocks))
    size_fields = [str(d) for d in sizes]
    if req.nonneg:
        size_fields.append(str(-len(req.nonneg)))
    lines.append(" ".join(size_fields))
    lines.append(" ".join(_fmt(v) for v in req.objective))

    entries = []  # (matno, blkno, i, j, value)
    for bi, (b0, coeffs) in enumerate(req.psd_blocks):
        d = b0.shape[0]
        for i in range(d):
            for j in range(i, d):
                if b0[i, j] != 0.0:
                    entries.append((0, bi + 1, i + 1, j + 1, -b0[i, j]))
        for v in sorted(coeffs):
            a = coeffs[v]
            for i in range(d):
                for j in range(i, d):
                    if a[i, j] != 0.0:
                        entries.append((v + 1, bi + 1, i + 1, j + 1, a[i, j]))
    if req.nonneg:
        blk = len(sizes) + 1
        for pos, (v, lb) in enumerate(req.nonneg):
            if lb != 0.0:
                entries.append((0, blk, pos + 1, pos + 1, lb))
            entries.append((v + 1, blk, pos + 1, pos + 1, 1.0))
    entries.sort(key=lambda e: (e[0], e[1], e[2], e[3]))
    for matno, blkno, i, j, val in entries:
        lines.append(f"{matno} {blkno} {i} {j} {_fmt(val)}")
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def import_request(path: str, options: SolverOptions = SolverOptions()) -> SolverRequest:
    """Read a file written by export_request.

    Solver options are not part of the file format; pass them explicitly
    if defaults are not wanted.
    """
    with open(path, "r") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    n_vars = int(lines[0])
    nblocks = int(lines[1])
    sizes = [int(t) for t in lines[2].split()] if lines[2].strip() else []
    if len(sizes) != nblocks:
        raise ValueError("block size list does not match the block count")
    c = np.array([float(t) for t in lines[3].split()], dtype=float)
    psd_sizes = [d for d in sizes if d > 0]
    diag_size = -sizes[-1] if sizes and sizes[-1] < 0 else 0
    if sum(1 for d in sizes if d < 0) > (1 if diag_size else 0):
        raise ValueError("at most one trailing diagonal block is supported")

    b0s = [np.zeros((d, d)) for d in psd_sizes]
    coeffs = [dict() for _ in psd_sizes]
    diag_const = np.zeros(diag_size)
    diag_vars = [dict() for _ in range(diag_size)]
    for ln in lines[4:]:
        if not ln.strip():
            continue
        matno_s, blkno_s, i_s, j_s, val_s = ln.split()
        matno, blkno = int(matno_s), int(blkno_s)
        i, j, val = int(i_s) - 1, int(j_s) - 1, float(val_s)
        if blkno <= len(psd_sizes):
            bi = blkno - 1
            if matno == 0:
                b0s[bi][i, j] = -val
                b0s[bi][j, i] = -val
            else:
                a = coeffs[bi].setdefault(matno - 1, np.zeros((psd_sizes[bi],) * 2))
                a[i, j] = val
                a[j, i] = val
        else:
            if i != j:
                raise ValueError("off-diagonal entry in the diagonal block")
            if matno == 0:
                diag_const[i] = val
            else:
                diag_vars[i][matno - 1] = val
    nonneg = []
    for pos in range(diag_size):
        row = diag_vars[pos]
        if len(row) != 1 or abs(next(iter(row.values())) - 1.0) != 0.0:
            raise ValueError("diagonal block rows must be single-variable "
                             "unit rows (x_v >= lb)")
        nonneg.append((next(iter(row)), float(diag_const[pos])))
    return SolverRequest(
        n_vars=n_vars, objective=c,
        psd_blocks=tuple((b0s[i], coeffs[i]) for i in range(len(psd_sizes))),
        nonneg=tuple(nonneg), options=options)
