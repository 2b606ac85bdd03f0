"""Assembly of the per-step min-max synthesis SDP and solution extraction.

At every measured state x_t the controller solves

    minimize gamma  over  (gamma, H, L, alpha, lambda)

subject to three small LMIs

    [1, x_t^T; x_t, H] >= 0,
    [H, L^T; L, S_u^{-1}] >= 0,
    [H, H; H, S_x^{-1}] >= 0,

scalar bounds gamma >= eps, lambda >= 0, alpha >= 0, and one large LMI
that couples the data-consistency multipliers M(alpha), the scheduling
bound blocks scaled by lambda, and two Schur-complement copies of
[H, Phi^T; Phi, gamma*I] with Phi = [M_R L; M_Q H].  The feedback gain
is F = L H^{-1} and the value-function matrix is P = gamma H^{-1}, so
gamma upper-bounds the worst-case infinite-horizon cost from x_t.

Variables are ordered (gamma, vech(H) row-major lower triangle, vec(L)
row-major, alpha_0..alpha_{T-1}, lambda); the ordering is fixed so that
exported problem files are deterministic.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from lpvmpc.consistency_set import sample_matrices
from lpvmpc.data_pipeline import DataSet
from lpvmpc.lpv_model import EIG_REL_TOL, SchedulingBound
from lpvmpc.solver_backend import SolverOptions, SolverRequest, SolverResult

# Default strictness margin scale of the large LMI: eps = EPS_SCALE*(1+||x_t||).
EPS_SCALE = 1e-7

# Condition-number limit on the recovered H before gain extraction is
# declared a numerical failure.
H_COND_LIMIT = 1e12

# Margin required of every constraint re-evaluated at a point reported
# optimal (absolute, applied to minimum eigenvalues and bound slacks).
AUDIT_MARGIN = 1e-7

# Acceptable residual scale for the gain equation F H = L.
GAIN_RESIDUAL_TOL = 1e-6


def _check_pd(m, name):
    w = np.linalg.eigvalsh(m)
    if w.min() <= EIG_REL_TOL * max(1.0, np.abs(w).max()):
        raise ValueError(f"{name} must be positive definite")


@dataclasses.dataclass(frozen=True)
class MpcIngredients:
    """Stage-cost and constraint-shape matrices with derived factors.

    M_Q and M_R are the upper-triangular Cholesky factors satisfying
    M_Q^T M_Q = Q and M_R^T M_R = R; construction verifies both factor
    residuals to 1e-12 relative.  S_x must be positive definite because
    its inverse enters the state-constraint LMI directly (a merely
    positive-semidefinite S_x has no usable inverse there).
    """

    Q: np.ndarray
    R: np.ndarray
    S_u: np.ndarray
    S_x: np.ndarray
    M_Q: np.ndarray = dataclasses.field(init=False)
    M_R: np.ndarray = dataclasses.field(init=False)
    S_u_inv: np.ndarray = dataclasses.field(init=False)
    S_x_inv: np.ndarray = dataclasses.field(init=False)

    def __post_init__(self):
        mats = {}
        for name in ("Q", "R", "S_u", "S_x"):
            m = np.atleast_2d(np.array(getattr(self, name), dtype=float))
            if m.shape[0] != m.shape[1]:
                raise ValueError(f"{name} must be square")
            if not np.isfinite(m).all():
                raise ValueError(f"{name} must be finite")
            if np.abs(m - m.T).max() > 1e-12 * max(1.0, np.abs(m).max()):
                raise ValueError(f"{name} must be symmetric")
            _check_pd(m, name)
            mats[name] = m
        if mats["Q"].shape != mats["S_x"].shape:
            raise ValueError("Q and S_x must both be n_x x n_x")
        if mats["R"].shape != mats["S_u"].shape:
            raise ValueError("R and S_u must both be n_u x n_u")
        mats["M_Q"] = np.linalg.cholesky(mats["Q"]).T
        mats["M_R"] = np.linalg.cholesky(mats["R"]).T
        for fname, mname in (("M_Q", "Q"), ("M_R", "R")):
            f, m = mats[fname], mats[mname]
            if np.abs(f.T @ f - m).max() > 1e-12 * np.abs(m).max():
                raise ValueError(f"Cholesky residual of {mname} too large")
        for name, inv_name in (("S_u", "S_u_inv"), ("S_x", "S_x_inv")):
            inv = np.linalg.inv(mats[name])
            mats[inv_name] = 0.5 * (inv + inv.T)
        for name, m in mats.items():
            m.setflags(write=False)
            object.__setattr__(self, name, m)

    @property
    def n_x(self) -> int:
        return self.Q.shape[0]

    @property
    def n_u(self) -> int:
        return self.R.shape[0]


def _sym_basis(n):
    """Symmetric unit bases in vech order (row-major lower triangle)."""
    pairs = []
    mats = []
    for i in range(n):
        for j in range(i + 1):
            e = np.zeros((n, n))
            e[i, j] = 1.0
            e[j, i] = 1.0
            pairs.append((i, j))
            mats.append(e)
    return pairs, mats


def _l_basis(n_u, n_x):
    mats = []
    for k in range(n_u * n_x):
        e = np.zeros((n_u, n_x))
        e[k // n_x, k % n_x] = 1.0
        mats.append(e)
    return mats


@dataclasses.dataclass(frozen=True)
class SdpProblem:
    """Assembled SDP: objective, PSD blocks, scalar bounds and the layout.

    psd_blocks holds (B0, coeffs) pairs meaning B0 + sum_v x_v A_v >= 0
    with coeffs mapping variable index to symmetric A_v; the first three
    blocks are the small LMIs in declaration order and the last is the
    large coupling LMI.  nonneg holds (index, lower bound) pairs.

    coeff_ratio is the ratio of largest to smallest nonzero magnitude
    across all variable coefficient matrices, reported as a conditioning
    diagnostic; the problem itself is assembled in native units.
    """

    n_x: int
    n_u: int
    n_z: int
    T: int
    x_t: np.ndarray
    eps: float
    objective: np.ndarray
    psd_blocks: tuple
    nonneg: tuple
    h_pairs: tuple
    idx_gamma: int
    idx_h0: int
    idx_l0: int
    idx_alpha0: int
    idx_lam: int
    n_vars: int
    coeff_ratio: float

    def __post_init__(self):
        x_t = np.array(self.x_t, dtype=float).reshape(-1)
        x_t.setflags(write=False)
        object.__setattr__(self, "x_t", x_t)
        c = np.array(self.objective, dtype=float).reshape(-1)
        c.setflags(write=False)
        object.__setattr__(self, "objective", c)

    def unpack(self, xvec):
        """Split a variable vector into (gamma, H, L, alpha, lam)."""
        xvec = np.asarray(xvec, dtype=float).reshape(-1)
        if xvec.shape != (self.n_vars,):
            raise ValueError(f"variable vector must have length {self.n_vars}")
        gamma = float(xvec[self.idx_gamma])
        h = np.zeros((self.n_x, self.n_x))
        for k, (i, j) in enumerate(self.h_pairs):
            h[i, j] = xvec[self.idx_h0 + k]
            h[j, i] = xvec[self.idx_h0 + k]
        l = xvec[self.idx_l0:self.idx_l0 + self.n_u * self.n_x]
        l = l.reshape(self.n_u, self.n_x).copy()
        alpha = xvec[self.idx_alpha0:self.idx_alpha0 + self.T].copy()
        lam = float(xvec[self.idx_lam])
        return gamma, h, l, alpha, lam

    def evaluate(self, xvec):
        """Constraint matrices B0 + sum_v x_v A_v at a variable vector."""
        xvec = np.asarray(xvec, dtype=float).reshape(-1)
        if xvec.shape != (self.n_vars,):
            raise ValueError(f"variable vector must have length {self.n_vars}")
        out = []
        for b0, coeffs in self.psd_blocks:
            m = b0.copy()
            for v, a in coeffs.items():
                m += xvec[v] * a
            out.append(m)
        return out

    def audit(self, xvec):
        """Minimum eigenvalue per LMI block plus scalar bound slacks."""
        mats = self.evaluate(xvec)
        xvec = np.asarray(xvec, dtype=float).reshape(-1)
        margins = [float(np.linalg.eigvalsh(0.5 * (m + m.T))[0]) for m in mats]
        slacks = [float(xvec[v] - lb) for v, lb in self.nonneg]
        return {
            "block_margins": margins,
            "bound_slacks": slacks,
            "min_margin": min(margins + slacks),
        }

    def to_request(self, options: SolverOptions = SolverOptions()) -> SolverRequest:
        return SolverRequest(
            n_vars=self.n_vars, objective=self.objective,
            psd_blocks=self.psd_blocks, nonneg=self.nonneg, options=options)


def assemble(x_t, ds: DataSet, bound: SchedulingBound, ing: MpcIngredients,
             eps: float | None = None, *, cd) -> SdpProblem:
    """Build the synthesis SDP for the measured state x_t.

    Parameters
    ----------
    x_t : array, shape (n_x,)
        Current state.
    ds : DataSet
        Recorded input-state data; T = 0 is allowed and drops the
        consistency multipliers entirely.
    bound : SchedulingBound
        QMI bound on the scheduling matrices.
    ing : MpcIngredients
        Cost and constraint matrices.
    eps : float, optional
        Strictness margin of the large LMI and lower bound on gamma.
        None selects EPS_SCALE*(1 + ||x_t||).
    cd : pair of arrays
        Scheduling channel matrices (C, D) with z = C x + D u.  Keyword
        only; they are plant data, not part of the dataset.

    Returns
    -------
    SdpProblem

    Notes
    -----
    The per-sample consistency matrices are rescaled to unit spectral
    norm before entering the large LMI; the rescaling is absorbed
    exactly by the nonnegative multipliers alpha and does not change
    the feasible set in (gamma, H, L, lambda).
    """
    x_t = np.asarray(x_t, dtype=float).reshape(-1)
    n_x, n_u, n_z, t_len = ds.n_x, ds.n_u, ds.n_z, ds.T
    if x_t.shape != (n_x,):
        raise ValueError(f"x_t must have length {n_x}")
    if not np.isfinite(x_t).all():
        raise ValueError("x_t must be finite")
    if bound.n_x != n_x or bound.n_z != n_z:
        raise ValueError("bound dimensions do not match the dataset")
    if ing.n_x != n_x or ing.n_u != n_u:
        raise ValueError("ingredient dimensions do not match the dataset")
    c_mat, d_mat = cd
    c_mat = np.asarray(c_mat, dtype=float)
    d_mat = np.asarray(d_mat, dtype=float)
    if c_mat.shape != (n_z, n_x):
        raise ValueError(f"C must be {n_z}x{n_x}")
    if d_mat.shape != (n_z, n_u):
        raise ValueError(f"D must be {n_z}x{n_u}")
    if not (np.isfinite(c_mat).all() and np.isfinite(d_mat).all()):
        raise ValueError("C and D must be finite")
    if eps is None:
        eps = EPS_SCALE * (1.0 + float(np.linalg.norm(x_t)))
    eps = float(eps)
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")

    h_pairs, hb = _sym_basis(n_x)
    lb = _l_basis(n_u, n_x)
    n_h = len(h_pairs)
    idx_gamma = 0
    idx_h0 = 1
    idx_l0 = 1 + n_h
    idx_alpha0 = idx_l0 + n_u * n_x
    idx_lam = idx_alpha0 + t_len
    n_vars = idx_lam + 1

    blocks = []

    # Value bound at the current state: [1, x_t^T; x_t, H] >= 0.
    d1 = 1 + n_x
    b0 = np.zeros((d1, d1))
    b0[0, 0] = 1.0
    b0[0, 1:] = x_t
    b0[1:, 0] = x_t
    coef = {}
    for k, eb in enumerate(hb):
        a = np.zeros((d1, d1))
        a[1:, 1:] = eb
        coef[idx_h0 + k] = a
    blocks.append((b0, coef))

    # Input constraint: [H, L^T; L, S_u^{-1}] >= 0.
    d2 = n_x + n_u
    b0 = np.zeros((d2, d2))
    b0[n_x:, n_x:] = ing.S_u_inv
    coef = {}
    for k, eb in enumerate(hb):
        a = np.zeros((d2, d2))
        a[:n_x, :n_x] = eb
        coef[idx_h0 + k] = a
    for k, eb in enumerate(lb):
        a = np.zeros((d2, d2))
        a[n_x:, :n_x] = eb
        a[:n_x, n_x:] = eb.T
        coef[idx_l0 + k] = a
    blocks.append((b0, coef))

    # State constraint: [H, H; H, S_x^{-1}] >= 0.
    d3 = 2 * n_x
    b0 = np.zeros((d3, d3))
    b0[n_x:, n_x:] = ing.S_x_inv
    coef = {}
    for k, eb in enumerate(hb):
        a = np.zeros((d3, d3))
        a[:n_x, :n_x] = eb
        a[n_x:, :n_x] = eb
        a[:n_x, n_x:] = eb
        coef[idx_h0 + k] = a
    blocks.append((b0, coef))

    # Large coupling LMI.  Row segments:
    #   x  (n_x)      rows carrying H - lambda*G11 and the -M(alpha) insertion
    #   w  (n_x)      rows contracted against the unknown state matrix
    #   u  (n_u)      rows contracted against the unknown input matrix
    #   z  (n_z)      rows contracted against the unknown scheduling matrix
    #   y1 (n_x), y2 (n_u+n_x)   first copy of [H, Phi^T; Phi, gamma*I]
    #   y3 (n_x), y4 (n_u+n_x)   second copy
    seg = np.cumsum([0, n_x, n_x, n_u, n_z, n_x, n_u + n_x, n_x, n_u + n_x])
    d_big = int(seg[-1])
    sx = slice(seg[0], seg[1])
    sw = slice(seg[1], seg[2])
    su = slice(seg[2], seg[3])
    sz = slice(seg[3], seg[4])
    sy1 = slice(seg[4], seg[5])
    sy2 = slice(seg[5], seg[6])
    sy3 = slice(seg[6], seg[7])
    sy4 = slice(seg[7], seg[8])
    s_r2 = slice(seg[5], seg[5] + n_u)
    s_q2 = slice(seg[5] + n_u, seg[6])
    s_r4 = slice(seg[7], seg[7] + n_u)
    s_q4 = slice(seg[7] + n_u, seg[8])

    def put(a, rows, cols, m):
        a[rows, cols] += m
        a[cols, rows] += m.T

    b0 = -eps * np.eye(d_big)
    coef = {}

    a = np.zeros((d_big, d_big))
    a[sx, sx] = -bound.g11
    put(a, sx, sz, -bound.g12)
    a[sz, sz] = -bound.g22
    coef[idx_lam] = a

    if t_len:
        mis = sample_matrices(ds, bound, normalize=True)
        d_m = 2 * n_x + n_u
        for i in range(t_len):
            a = np.zeros((d_big, d_big))
            a[:d_m, :d_m] = -mis[i]
            coef[idx_alpha0 + i] = a

    for k, eb in enumerate(hb):
        a = np.zeros((d_big, d_big))
        a[sx, sx] += eb
        put(a, sw, sy1, eb)
        put(a, sw, sy3, eb)
        ch = c_mat @ eb
        put(a, sz, sy1, ch)
        put(a, sz, sy3, ch)
        a[sy1, sy1] += eb
        a[sy3, sy3] += eb
        mqh = ing.M_Q @ eb
        put(a, s_q2, sy1, mqh)
        put(a, s_q4, sy3, mqh)
        coef[idx_h0 + k] = a

    for k, eb in enumerate(lb):
        a = np.zeros((d_big, d_big))
        put(a, su, sy1, eb)
        put(a, su, sy3, eb)
        dl = d_mat @ eb
        put(a, sz, sy1, dl)
        put(a, sz, sy3, dl)
        mrl = ing.M_R @ eb
        put(a, s_r2, sy1, mrl)
        put(a, s_r4, sy3, mrl)
        coef[idx_l0 + k] = a

    a = np.zeros((d_big, d_big))
    a[sy2, sy2] = np.eye(n_u + n_x)
    a[sy4, sy4] = np.eye(n_u + n_x)
    coef[idx_gamma] = a
    blocks.append((b0, coef))

    mags = np.concatenate([np.abs(a[a != 0.0]).reshape(-1)
                           for _, cs in blocks for a in cs.values()])
    coeff_ratio = float(mags.max() / mags.min()) if mags.size else 1.0

    objective = np.zeros(n_vars)
    objective[idx_gamma] = 1.0
    nonneg = ((idx_gamma, eps), (idx_lam, 0.0))
    nonneg += tuple((idx_alpha0 + i, 0.0) for i in range(t_len))

    return SdpProblem(
        n_x=n_x, n_u=n_u, n_z=n_z, T=t_len, x_t=x_t, eps=eps,
        objective=objective, psd_blocks=tuple(blocks), nonneg=nonneg,
        h_pairs=tuple(h_pairs), idx_gamma=idx_gamma, idx_h0=idx_h0,
        idx_l0=idx_l0, idx_alpha0=idx_alpha0, idx_lam=idx_lam,
        n_vars=n_vars, coeff_ratio=coeff_ratio)


@dataclasses.dataclass(frozen=True)
class SdpSolution:
    """Controller quantities extracted from one solved step.

    status is 'optimal', 'infeasible' or 'numerical_failure'.  The
    matrix fields are populated only when status is 'optimal':
    F = L H^{-1} solves the gain equation F H = L and P = gamma H^{-1}
    is the value-function matrix, symmetric positive definite.
    """

    status: str
    x_t: np.ndarray
    objective: float | None = None
    gamma: float | None = None
    H: np.ndarray | None = None
    L: np.ndarray | None = None
    alpha: np.ndarray | None = None
    lam: float | None = None
    F: np.ndarray | None = None
    P: np.ndarray | None = None
    diagnostics: dict = dataclasses.field(default_factory=dict)
    solver_result: SolverResult | None = None

    def __post_init__(self):
        if self.status not in ("optimal", "infeasible", "numerical_failure"):
            raise ValueError(f"unknown status {self.status!r}")
        x_t = np.array(self.x_t, dtype=float).reshape(-1)
        x_t.setflags(write=False)
        object.__setattr__(self, "x_t", x_t)
        for name in ("H", "L", "alpha", "F", "P"):
            m = getattr(self, name)
            if m is not None:
                m = np.array(m, dtype=float)
                m.setflags(write=False)
                object.__setattr__(self, name, m)


def extract(prob: SdpProblem, result: SolverResult) -> SdpSolution:
    """Turn a solver result into controller quantities.

    The gain is computed by solving F H = L, never by forming H^{-1}
    explicitly; P = gamma H^{-1} comes from the same factorization.  A
    solution whose H is numerically singular (condition number above
    H_COND_LIMIT), whose gain residual exceeds
    GAIN_RESIDUAL_TOL*(1+||L||), or that fails the feasible-point audit
    (any constraint below -AUDIT_MARGIN) is degraded to
    numerical_failure with diagnostics explaining why.
    """
    if result.status == "infeasible":
        return SdpSolution(status="infeasible", x_t=prob.x_t,
                           diagnostics=dict(result.diagnostics),
                           solver_result=result)
    if result.status != "optimal":
        diag = dict(result.diagnostics)
        diag["solver_status"] = result.status
        return SdpSolution(status="numerical_failure", x_t=prob.x_t,
                           diagnostics=diag, solver_result=result)

    gamma, h, l, alpha, lam = prob.unpack(result.x)
    diag = {"coeff_ratio": prob.coeff_ratio, "eps": prob.eps}

    w = np.linalg.eigvalsh(h)
    if w[0] <= 0.0 or w[-1] / w[0] > H_COND_LIMIT:
        diag["h_eigenvalues"] = w
        diag["failure"] = "H numerically singular"
        return SdpSolution(status="numerical_failure", x_t=prob.x_t,
                           diagnostics=diag, solver_result=result)
    diag["h_cond"] = float(w[-1] / w[0])

    f = np.linalg.solve(h.T, l.T).T
    gain_residual = float(np.abs(f @ h - l).max())
    diag["gain_residual"] = gain_residual
    if gain_residual > GAIN_RESIDUAL_TOL * (1.0 + float(np.abs(l).max())):
        diag["failure"] = "gain equation residual too large"
        return SdpSolution(status="numerical_failure", x_t=prob.x_t,
                           diagnostics=diag, solver_result=result)

    p = gamma * np.linalg.solve(h, np.eye(prob.n_x))
    p = 0.5 * (p + p.T)
    diag["value_at_state"] = float(prob.x_t @ p @ prob.x_t)

    audit = prob.audit(result.x)
    diag["audit"] = audit
    if audit["min_margin"] < -AUDIT_MARGIN:
        diag["failure"] = "feasible-point audit failed"
        return SdpSolution(status="numerical_failure", x_t=prob.x_t,
                           diagnostics=diag, solver_result=result)

    return SdpSolution(
        status="optimal", x_t=prob.x_t, objective=result.objective,
        gamma=gamma, H=h, L=l, alpha=alpha, lam=lam, F=f, P=p,
        diagnostics=diag, solver_result=result)
