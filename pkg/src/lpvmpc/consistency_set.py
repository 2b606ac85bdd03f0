"""Projection of QMI uncertainty sets and the data consistency set.

Two pieces live here.  First, the projection property: for a bounded QMI set
in a matrix variable and a full-row-rank matrix E, the image of the set
under left multiplication by E is again a QMI set, with blocks computable
in closed form (`project_qmi`), and every point of the image has a
constructible preimage (`reconstruct_preimage`).

Second, the consistency set Sigma: all pairs (A, B) that could have
produced a recorded dataset for some admissible scheduling sequence.
Each data sample i contributes one quadratic constraint on (A, B) built
from a small matrix N_i; Sigma is the intersection over samples, and
membership is decided per sample (`in_sigma`).  Nonnegative combinations
of the per-sample constraints (`build_m`) enter the controller synthesis
program as multipliers.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from lpvmpc.data_pipeline import TAU_Z, DataSet
from lpvmpc.lpv_model import EIG_REL_TOL, SchedulingBound

# Full-row-rank test for E: largest/smallest singular value ratio limit.
RANK_RATIO_LIMIT = 1e10


@dataclasses.dataclass(frozen=True)
class ProjectedQmi:
    """Blocks of the projected QMI set {V : [I; V]^T Y [I; V] >= 0}.

    For an input set over matrices Delta-transpose of shape (n_z, n_x)
    projected through E of shape (m, n_z), the blocks are y11 (n_x, n_x),
    y12 (n_x, m), y22 (m, m), and V = E Delta^T has shape (m, n_x).
    """

    y11: np.ndarray
    y12: np.ndarray
    y22: np.ndarray

    def __post_init__(self):
        y11 = np.atleast_2d(np.array(self.y11, dtype=float))
        y12 = np.atleast_2d(np.array(self.y12, dtype=float))
        y22 = np.atleast_2d(np.array(self.y22, dtype=float))
        if y11.shape[0] != y11.shape[1] or y22.shape[0] != y22.shape[1]:
            raise ValueError("y11 and y22 must be square")
        if y12.shape != (y11.shape[0], y22.shape[0]):
            raise ValueError("y12 shape inconsistent with y11, y22")
        y11 = 0.5 * (y11 + y11.T)
        y22 = 0.5 * (y22 + y22.T)
        eig22 = np.linalg.eigvalsh(y22)
        if eig22.max() >= -EIG_REL_TOL * max(1.0, np.abs(eig22).max()):
            raise ValueError("projected y22 block must be negative definite")
        schur = y11 - y12 @ np.linalg.solve(y22, y12.T)
        eig_s = np.linalg.eigvalsh(0.5 * (schur + schur.T))
        if eig_s.min() <= EIG_REL_TOL * max(1.0, np.abs(eig_s).max()):
            raise ValueError("projected set is degenerate: Schur complement not PD")
        for m in (y11, y12, y22):
            m.setflags(write=False)
        object.__setattr__(self, "y11", y11)
        object.__setattr__(self, "y12", y12)
        object.__setattr__(self, "y22", y22)

    @property
    def full(self) -> np.ndarray:
        return np.block([[self.y11, self.y12], [self.y12.T, self.y22]])

    def value(self, v) -> np.ndarray:
        """Quadratic form at V (shape (m, n_x)); PSD iff V is in the set."""
        v = np.atleast_2d(np.asarray(v, dtype=float))
        out = self.y11 + self.y12 @ v + v.T @ self.y12.T + v.T @ self.y22 @ v
        return 0.5 * (out + out.T)

    def contains(self, v, tol: float = 1e-10) -> bool:
        return bool(np.linalg.eigvalsh(self.value(v)).min() >= -tol)


def _check_full_row_rank(e):
    sv = np.linalg.svd(e, compute_uv=False)
    if e.shape[0] > e.shape[1]:
        raise ValueError("E cannot have more rows than columns")
    if sv.min() <= 0.0 or sv.max() / sv.min() >= RANK_RATIO_LIMIT:
        raise ValueError("E must have full row rank (singular value ratio "
                         f"{sv.max() / max(sv.min(), 1e-300):.2e} too large)")


def project_qmi(e, gtilde: SchedulingBound) -> ProjectedQmi:
    """Project the QMI set of `gtilde` through E (full row rank).

    The image {E Delta^T : Delta in the set} is described exactly by the
    blocks

        y22 = (E g22^{-1} E^T)^{-1}
        k   = E g22^{-1} g12^T
        y11 = schur + k^T y22 k,   y12 = k^T y22

    which is the closed form the set-equality proof produces.
    """
    e = np.atleast_2d(np.asarray(e, dtype=float))
    if e.shape[1] != gtilde.n_z:
        raise ValueError(f"E must have {gtilde.n_z} columns, got {e.shape[1]}")
    _check_full_row_rank(e)
    g22_inv_et = np.linalg.solve(gtilde.g22, e.T)
    w_inv = e @ g22_inv_et
    w = np.linalg.inv(w_inv)
    w = 0.5 * (w + w.T)
    k = g22_inv_et.T @ gtilde.g12.T
    return ProjectedQmi(y11=gtilde.schur + k.T @ w @ k, y12=k.T @ w, y22=w)


def _kernel_rows(e):
    """Rows spanning the kernel of E (so that rows @ E^T = 0)."""
    m, n = e.shape
    _, _, vh = np.linalg.svd(e)
    return vh[m:, :]


def reconstruct_preimage(e, gtilde: SchedulingBound, v) -> np.ndarray:
    """A Delta in the original set with E Delta^T = V.

    Implements the candidate from the set-equality proof: the preimage
    combines the minimum-norm-like solution through g22^{-1} E^T with a
    completion along the kernel of E anchored at the set center.  Whenever
    V satisfies the projected QMI, the returned Delta satisfies the
    original QMI (up to round-off).
    """
    e = np.atleast_2d(np.asarray(e, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if e.shape[1] != gtilde.n_z:
        raise ValueError(f"E must have {gtilde.n_z} columns, got {e.shape[1]}")
    if v.shape != (e.shape[0], gtilde.n_x):
        raise ValueError(f"V must be {e.shape[0]}x{gtilde.n_x}, got {v.shape}")
    _check_full_row_rank(e)
    g22 = gtilde.g22
    g22_inv_et = np.linalg.solve(g22, e.T)
    w_inv = e @ g22_inv_et
    delta_t = g22_inv_et @ np.linalg.solve(w_inv, v)
    perp = _kernel_rows(e)
    if perp.shape[0]:
        core = perp @ g22 @ perp.T
        delta_t = delta_t + perp.T @ np.linalg.solve(core, perp @ g22 @ gtilde.center)
    return delta_t.T


def build_ni(z, bound: SchedulingBound) -> np.ndarray:
    """Per-sample matrix N_i for a data sample with performance output z.

    Equals project_qmi(z^T, bound).full: the (n_x+1) square matrix whose
    QMI describes the set of disturbance vectors {Delta z : Delta
    admissible}.  Its trailing scalar is (z^T g22^{-1} z)^{-1} < 0 and its
    Schur complement with respect to that scalar is the bound's Schur
    complement.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape != (bound.n_z,):
        raise ValueError(f"z must have length {bound.n_z}")
    nz = float(np.linalg.norm(z))
    if nz <= TAU_Z:
        raise ValueError(
            f"z norm {nz:.3e} is at or below the informativity threshold "
            f"{TAU_Z}; such a sample carries no scheduling information")
    g22_inv_z = np.linalg.solve(bound.g22, z)
    s = float(z @ g22_inv_z)
    k = g22_inv_z @ bound.g12.T
    n_x = bound.n_x
    out = np.empty((n_x + 1, n_x + 1))
    out[:n_x, :n_x] = bound.schur + np.outer(k, k) / s
    out[:n_x, n_x] = k / s
    out[n_x, :n_x] = k / s
    out[n_x, n_x] = 1.0 / s
    return out


def outer_for(x_i, u_i, x_next) -> np.ndarray:
    """Sample embedding [I, x_{i+1}; 0, -x_i; 0, -u_i] of shape (2n_x+n_u, n_x+1)."""
    x_i = np.asarray(x_i, dtype=float).reshape(-1)
    u_i = np.asarray(u_i, dtype=float).reshape(-1)
    x_next = np.asarray(x_next, dtype=float).reshape(-1)
    n_x, n_u = x_i.size, u_i.size
    out = np.zeros((2 * n_x + n_u, n_x + 1))
    out[:n_x, :n_x] = np.eye(n_x)
    out[:n_x, n_x] = x_next
    out[n_x:2 * n_x, n_x] = -x_i
    out[2 * n_x:, n_x] = -u_i
    return out


def sample_matrices(ds: DataSet, bound: SchedulingBound,
                    normalize: bool = False) -> np.ndarray:
    """Stack of per-sample matrices outer_i N_i outer_i^T, shape (T, d, d).

    With normalize=True each matrix is rescaled to unit spectral norm;
    the rescaling is absorbed by the nonnegative multipliers wherever the
    matrices appear and improves conditioning inside the solver.
    """
    d = 2 * ds.n_x + ds.n_u
    out = np.empty((ds.T, d, d))
    for i in range(ds.T):
        o = outer_for(ds.X[:, i], ds.U[:, i], ds.X[:, i + 1])
        m = o @ build_ni(ds.Z[:, i], bound) @ o.T
        m = 0.5 * (m + m.T)
        if normalize:
            m = m / max(np.abs(np.linalg.eigvalsh(m)).max(), 1e-300)
        out[i] = m
    return out


@dataclasses.dataclass(frozen=True)
class ConsistencyCertificate:
    """Cached per-sample matrices for repeated membership tests.

    Holds outer_i, N_i and their products M_i = outer_i N_i outer_i^T for
    every sample, plus the per-sample tolerance used by the membership
    test.
    """

    outers: tuple
    nis: tuple
    mis: np.ndarray
    tols: np.ndarray

    @classmethod
    def from_data(cls, ds: DataSet, bound: SchedulingBound) -> "ConsistencyCertificate":
        outers = tuple(outer_for(ds.X[:, i], ds.U[:, i], ds.X[:, i + 1])
                       for i in range(ds.T))
        nis = tuple(build_ni(ds.Z[:, i], bound) for i in range(ds.T))
        d = 2 * ds.n_x + ds.n_u
        mis = np.empty((ds.T, d, d))
        for i in range(ds.T):
            m = outers[i] @ nis[i] @ outers[i].T
            mis[i] = 0.5 * (m + m.T)
        if ds.T:
            norms = np.abs(np.linalg.eigvalsh(mis)).max(axis=1)
        else:
            norms = np.zeros(0)
        return cls(outers=outers, nis=nis, mis=mis, tols=1e-8 * (1.0 + norms))

    @property
    def T(self) -> int:
        return len(self.outers)

    def m_of(self, alpha) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=float).reshape(-1)
        if alpha.shape != (self.T,):
            raise ValueError(f"alpha must have length {self.T}")
        if self.T == 0:
            raise ValueError("empty certificate has no sample matrices")
        if (alpha < 0).any():
            raise ValueError("alpha entries must be nonnegative")
        return np.einsum("i,ijk->jk", alpha, self.mis)

    def margins(self, a, b) -> np.ndarray:
        """Per-sample minimum eigenvalue of [I; A^T; B^T]^T M_i [I; A^T; B^T]."""
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        n_x = a.shape[0]
        v = np.vstack([np.eye(n_x), a.T, b.T])
        if self.T == 0:
            return np.zeros(0)
        vals = np.einsum("pj,ipq,qk->ijk", v, self.mis, v)
        vals = 0.5 * (vals + np.swapaxes(vals, 1, 2))
        return np.linalg.eigvalsh(vals)[:, 0]

    def contains(self, a, b, tol=None) -> bool:
        m = self.margins(a, b)
        if m.size == 0:
            return True
        tols = self.tols if tol is None else np.full(self.T, float(tol))
        return bool((m >= -tols).all())


def build_m(ds: DataSet, bound: SchedulingBound, alpha) -> np.ndarray:
    """The multiplier aggregate M(alpha) = sum_i alpha_i outer_i N_i outer_i^T.

    alpha must be elementwise nonnegative with one entry per sample.
    Linear in alpha by construction.  For an empty dataset the result is
    the zero matrix of size 2 n_x + n_u.
    """
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    if alpha.shape != (ds.T,):
        raise ValueError(f"alpha must have length T={ds.T}, got {alpha.shape[0]}")
    if (alpha < 0).any():
        raise ValueError("alpha entries must be nonnegative")
    d = 2 * ds.n_x + ds.n_u
    if ds.T == 0:
        return np.zeros((d, d))
    mis = sample_matrices(ds, bound)
    return np.einsum("i,ijk->jk", alpha, mis)


def in_sigma(a, b, ds: DataSet, bound: SchedulingBound, tol=None) -> bool:
    """True iff (A, B) is consistent with every sample of the dataset.

    Checks, for each sample i, that the quadratic form of M_i at
    [I; A^T; B^T] is positive semidefinite up to tol.  tol=None selects
    the per-sample default 1e-8 (1 + ||M_i||).  The per-sample test is
    equivalent to requiring the nonnegative-combination form for every
    admissible multiplier vector.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape != (ds.n_x, ds.n_x):
        raise ValueError(f"A must be {ds.n_x}x{ds.n_x}, got {a.shape}")
    if b.shape != (ds.n_x, ds.n_u):
        raise ValueError(f"B must be {ds.n_x}x{ds.n_u}, got {b.shape}")
    cert = ConsistencyCertificate.from_data(ds, bound)
    return cert.contains(a, b, tol=tol)
