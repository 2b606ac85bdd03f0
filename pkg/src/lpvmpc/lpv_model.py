"""LPV plant model with a quadratic matrix inequality bound on the scheduling.

The system class is

    x_{t+1} = A_s x_t + B_s u_t + Delta_t z_t,    z_t = C x_t + D u_t,

where Delta_t is an unknown, time-varying n_x-by-n_z matrix known only to
lie in the set

    Pi = { Delta : [I; Delta^T]^T G [I; Delta^T] >= 0 }

for a symmetric block matrix G = [[G11, G12], [G12^T, G22]] with G22
negative definite and positive definite Schur complement
G11 - G12 G22^{-1} G12^T.  Under these conditions Pi is a bounded matrix
ellipsoid centered at -G12 G22^{-T} (stored transposed as `center`).
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

# Relative tolerance for definiteness checks, scaled by the largest
# absolute eigenvalue of the matrix under test.
EIG_REL_TOL = 1e-9

# A bound matrix G with condition number above this is rejected as
# numerically non-invertible.
COND_LIMIT = 1e12


def _as_matrix(a, name):
    m = np.array(a, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    if m.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got ndim={m.ndim}")
    return m


def _check_symmetric(m, name, rtol=1e-12):
    scale = max(1.0, float(np.abs(m).max()))
    if np.abs(m - m.T).max() > rtol * scale:
        raise ValueError(f"{name} must be symmetric")


def _sym_sqrt(m):
    """Symmetric square root of a symmetric PSD matrix."""
    w, v = np.linalg.eigh(m)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def _sym_inv_sqrt(m):
    """Inverse symmetric square root of a symmetric PD matrix."""
    w, v = np.linalg.eigh(m)
    return (v / np.sqrt(w)) @ v.T


@dataclasses.dataclass(frozen=True)
class Dimensions:
    """State, input and performance-channel dimensions."""

    n_x: int
    n_u: int
    n_z: int

    def __post_init__(self):
        for name in ("n_x", "n_u", "n_z"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))


@dataclasses.dataclass(frozen=True)
class SchedulingBound:
    """QMI description of the admissible scheduling set Pi.

    Parameters
    ----------
    g11 : (n_x, n_x) symmetric
    g12 : (n_x, n_z)
    g22 : (n_z, n_z) symmetric negative definite

    The Schur complement g11 - g12 g22^{-1} g12^T must be positive
    definite and the assembled block matrix well conditioned; violations
    raise ValueError at construction.
    """

    g11: np.ndarray
    g12: np.ndarray
    g22: np.ndarray

    def __post_init__(self):
        g11 = _as_matrix(self.g11, "g11")
        g12 = _as_matrix(self.g12, "g12")
        g22 = _as_matrix(self.g22, "g22")
        if g11.shape[0] != g11.shape[1]:
            raise ValueError("g11 must be square")
        if g22.shape[0] != g22.shape[1]:
            raise ValueError("g22 must be square")
        if g12.shape != (g11.shape[0], g22.shape[0]):
            raise ValueError(
                f"g12 must be {g11.shape[0]}x{g22.shape[0]}, got {g12.shape}")
        _check_symmetric(g11, "g11")
        _check_symmetric(g22, "g22")
        g11 = 0.5 * (g11 + g11.T)
        g22 = 0.5 * (g22 + g22.T)
        for m in (g11, g12, g22):
            m.setflags(write=False)
        object.__setattr__(self, "g11", g11)
        object.__setattr__(self, "g12", g12)
        object.__setattr__(self, "g22", g22)

        eig22 = np.linalg.eigvalsh(g22)
        tol22 = EIG_REL_TOL * max(1.0, np.abs(eig22).max())
        if eig22.max() >= -tol22:
            raise ValueError("g22 must be negative definite")

        schur = g11 - g12 @ np.linalg.solve(g22, g12.T)
        schur = 0.5 * (schur + schur.T)
        eig_s = np.linalg.eigvalsh(schur)
        tol_s = EIG_REL_TOL * max(1.0, np.abs(eig_s).max())
        if eig_s.min() <= tol_s:
            raise ValueError("Schur complement of the bound must be positive definite")

        full = np.block([[g11, g12], [g12.T, g22]])
        sv = np.linalg.svd(full, compute_uv=False)
        if sv[-1] <= 0.0 or sv[0] / sv[-1] >= COND_LIMIT:
            raise ValueError("assembled bound matrix is numerically singular")

        center = -np.linalg.solve(g22, g12.T)
        for m in (schur, full, center):
            m.setflags(write=False)
        object.__setattr__(self, "_schur", schur)
        object.__setattr__(self, "_full", full)
        object.__setattr__(self, "_center", center)
        # Factors used by the sampler: Delta^T = center + (-g22)^{-1/2} W schur^{1/2}.
        m22_inv_sqrt = _sym_inv_sqrt(-g22)
        schur_sqrt = _sym_sqrt(schur)
        m22_inv_sqrt.setflags(write=False)
        schur_sqrt.setflags(write=False)
        object.__setattr__(self, "_m22_inv_sqrt", m22_inv_sqrt)
        object.__setattr__(self, "_schur_sqrt", schur_sqrt)

    @property
    def n_x(self) -> int:
        return self.g11.shape[0]

    @property
    def n_z(self) -> int:
        return self.g22.shape[0]

    @property
    def schur(self) -> np.ndarray:
        """g11 - g12 g22^{-1} g12^T, positive definite."""
        return self._schur

    @property
    def center(self) -> np.ndarray:
        """Center of Pi in transposed coordinates: -g22^{-1} g12^T, (n_z, n_x)."""
        return self._center

    @property
    def full(self) -> np.ndarray:
        """The assembled (n_x+n_z) square block matrix G."""
        return self._full


def interval_bound(l: float, u: float, scale: float = 1.0, size: int = 1) -> SchedulingBound:
    """Bound for a scalar scheduling value a in [l, u] repeated on the diagonal.

    The scalar constraint (a - l)(u - a) >= 0 expands to the QMI blocks
    g11 = -l*u*scale*I, g12 = (l+u)/2*scale*I, g22 = -scale*I of size
    `size`.  Any Delta = a*I with a in [l, u] then satisfies the QMI, and
    the full set additionally contains non-diagonal matrices within the
    same weighted ball.
    """
    if not u > l:
        raise ValueError(f"need u > l, got l={l}, u={u}")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    eye = np.eye(size)
    return SchedulingBound(
        g11=-scale * l * u * eye,
        g12=scale * (l + u) / 2 * eye,
        g22=-scale * eye,
    )


@dataclasses.dataclass(frozen=True)
class LpvPlant:
    """System matrices plus the scheduling bound.

    Fields A_s, B_s hold the nominal (true) dynamics used for simulation
    and data generation; C, D define the performance channel z = Cx + Du
    through which the scheduling matrix enters.
    """

    A_s: np.ndarray
    B_s: np.ndarray
    C: np.ndarray
    D: np.ndarray
    bound: SchedulingBound

    def __post_init__(self):
        a = _as_matrix(self.A_s, "A_s")
        b = _as_matrix(self.B_s, "B_s")
        c = _as_matrix(self.C, "C")
        d = _as_matrix(self.D, "D")
        n_x = a.shape[0]
        if a.shape != (n_x, n_x):
            raise ValueError("A_s must be square")
        if b.shape[0] != n_x:
            raise ValueError("B_s row count must match A_s")
        n_u = b.shape[1]
        n_z = c.shape[0]
        if c.shape != (n_z, n_x):
            raise ValueError("C column count must match A_s")
        if d.shape != (n_z, n_u):
            raise ValueError(f"D must be {n_z}x{n_u}, got {d.shape}")
        if self.bound.n_x != n_x or self.bound.n_z != n_z:
            raise ValueError("bound dimensions do not match the plant")
        for m in (a, b, c, d):
            m.setflags(write=False)
        object.__setattr__(self, "A_s", a)
        object.__setattr__(self, "B_s", b)
        object.__setattr__(self, "C", c)
        object.__setattr__(self, "D", d)

    @property
    def dims(self) -> Dimensions:
        return Dimensions(self.A_s.shape[0], self.B_s.shape[1], self.C.shape[0])


def qmi_eval(delta, bound: SchedulingBound) -> np.ndarray:
    """Evaluate the bound's quadratic form at Delta.

    Returns the symmetric n_x-by-n_x matrix
    g11 + g12 Delta^T + Delta g12^T + Delta g22 Delta^T; Delta lies in Pi
    iff the result is positive semidefinite.  Accepts a stacked array of
    shape (..., n_x, n_z) and then returns shape (..., n_x, n_x).
    """
    d = np.asarray(delta, dtype=float)
    if d.ndim == 0:
        d = d.reshape(1, 1)
    if d.shape[-2:] != (bound.n_x, bound.n_z):
        raise ValueError(
            f"delta must have trailing shape ({bound.n_x}, {bound.n_z}), got {d.shape}")
    dt = np.swapaxes(d, -1, -2)
    v = bound.g11 + bound.g12 @ dt + d @ bound.g12.T + d @ bound.g22 @ dt
    return 0.5 * (v + np.swapaxes(v, -1, -2))


def in_pi(delta, bound: SchedulingBound, tol: float = 1e-10) -> bool:
    """True iff the minimum eigenvalue of the QMI at Delta is >= -tol."""
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    v = qmi_eval(delta, bound)
    if v.ndim != 2:
        raise ValueError("in_pi takes a single Delta; use qmi_eval for batches")
    return bool(np.linalg.eigvalsh(v).min() >= -tol)


def sample_pi(bound: SchedulingBound, rng: np.random.Generator,
              boundary: bool = False) -> np.ndarray:
    """Draw one Delta from Pi.

    A Gaussian matrix W is rescaled to a uniformly random maximum singular
    value in [0, 1] (exactly 1 when boundary=True) and mapped through
    Delta^T = center + (-g22)^{-1/2} W schur^{1/2}, which parameterizes Pi
    exactly.
    """
    w = rng.standard_normal((bound.n_z, bound.n_x))
    target = 1.0 if boundary else float(rng.uniform())
    smax = np.linalg.svd(w, compute_uv=False)[0]
    if smax > 0:
        w = w * (target / smax)
    else:
        w = np.zeros_like(w)
    dt = bound.center + bound._m22_inv_sqrt @ w @ bound._schur_sqrt
    return dt.T


def sample_pi_batch(bound: SchedulingBound, rng: np.random.Generator, n: int,
                    boundary_fraction: float = 0.0) -> np.ndarray:
    """Stack of n samples from Pi, the first ceil(n*boundary_fraction) on the boundary.

    Returns shape (n, n_x, n_z).  The stream layout is fixed: one batch
    of n Gaussian matrices, then one batch of radii for the interior
    samples, so results are reproducible for a given generator state.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    n_boundary = math.ceil(n * boundary_fraction)
    if not 0 <= n_boundary <= n:
        raise ValueError("boundary_fraction must lie in [0, 1]")
    w = rng.standard_normal((n, bound.n_z, bound.n_x))
    targets = np.ones(n)
    targets[n_boundary:] = rng.uniform(size=n - n_boundary)
    if n == 0:
        return np.empty((0, bound.n_x, bound.n_z))
    smax = np.linalg.svd(w, compute_uv=False)[:, 0]
    scale = np.where(smax > 0.0, targets / np.where(smax > 0.0, smax, 1.0), 0.0)
    w = w * scale[:, None, None]
    dt = bound.center + bound._m22_inv_sqrt @ w @ bound._schur_sqrt
    return np.transpose(dt, (0, 2, 1))


def step(plant: LpvPlant, x, u, delta) -> np.ndarray:
    """One step of the dynamics: A_s x + B_s u + Delta (C x + D u)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    d = np.asarray(delta, dtype=float)
    if d.ndim == 0:
        d = d.reshape(1, 1)
    n = plant.dims
    if x.shape != (n.n_x,) or u.shape != (n.n_u,):
        raise ValueError(f"expected x of length {n.n_x} and u of length {n.n_u}")
    if d.shape != (n.n_x, n.n_z):
        raise ValueError(f"delta must be {n.n_x}x{n.n_z}, got {d.shape}")
    z = plant.C @ x + plant.D @ u
    return plant.A_s @ x + plant.B_s @ u + d @ z


def output(plant: LpvPlant, x, u) -> np.ndarray:
    """Performance channel z = C x + D u."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    return plant.C @ x + plant.D @ u


def _diag_delta(a: float, bound: SchedulingBound) -> np.ndarray:
    if bound.n_x != bound.n_z:
        raise ValueError("scalar scheduling needs n_x == n_z")
    return a * np.eye(bound.n_x)


def scheduling_generator(spec, bound: SchedulingBound):
    """Build a scheduling generator from a spec dict, or pass a callable through.

    A generator is a callable (t, x, z, rng) -> Delta.  Supported kinds:

    - {'kind': 'constant', 'value': scalar or matrix}  (default: set center)
    - {'kind': 'interval_uniform', 'low': l, 'high': u}  Delta = a*I with a
      drawn uniformly from [l, u]; exactly one uniform variate per step.
    - {'kind': 'uniform_iid'}  full-matrix draw via sample_pi each step.
    - {'kind': 'sinusoidal', 'period': p, 'low': l, 'high': u}  deterministic
      a(t) = l + (u-l)*(1+sin(2*pi*t/p))/2; without low/high the path runs
      from the set center to a fixed boundary point instead.
    - {'kind': 'adversarial_boundary', 'candidates': k}  k boundary samples
      per step, keeping the one that maximizes the disturbance ||Delta z||.
    """
    if callable(spec):
        return spec
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ValueError("scheduling spec must be a dict with a 'kind' key or a callable")
    kind = spec["kind"]

    if kind == "constant":
        value = spec.get("value")
        if value is None:
            delta0 = bound.center.T.copy()
        elif np.ndim(value) == 0:
            delta0 = _diag_delta(float(value), bound)
        else:
            delta0 = np.asarray(value, dtype=float)
        if not in_pi(delta0, bound):
            raise ValueError("constant scheduling value lies outside the bound")

        def gen_constant(t, x, z, rng):
            return delta0

        return gen_constant

    if kind == "interval_uniform":
        lo, hi = float(spec["low"]), float(spec["high"])
        if not hi >= lo:
            raise ValueError("interval_uniform needs high >= low")

        def gen_interval(t, x, z, rng):
            a = lo + (hi - lo) * rng.uniform()
            return _diag_delta(a, bound)

        return gen_interval

    if kind == "uniform_iid":
        def gen_iid(t, x, z, rng):
            return sample_pi(bound, rng)

        return gen_iid

    if kind == "sinusoidal":
        period = float(spec.get("period", 20.0))
        if period <= 0:
            raise ValueError("period must be positive")
        if "low" in spec or "high" in spec:
            lo, hi = float(spec["low"]), float(spec["high"])

            def gen_sin(t, x, z, rng):
                s = 0.5 * (1.0 + math.sin(2.0 * math.pi * t / period))
                return _diag_delta(lo + (hi - lo) * s, bound)

            return gen_sin

        w_dir = np.ones((bound.n_z, bound.n_x))
        w_dir /= np.linalg.svd(w_dir, compute_uv=False)[0]
        reach = bound._m22_inv_sqrt @ w_dir @ bound._schur_sqrt

        def gen_sin_matrix(t, x, z, rng):
            s = 0.5 * (1.0 + math.sin(2.0 * math.pi * t / period))
            return (bound.center + s * reach).T

        return gen_sin_matrix

    if kind == "adversarial_boundary":
        k = int(spec.get("candidates", 16))
        if k < 1:
            raise ValueError("candidates must be >= 1")

        def gen_adv(t, x, z, rng):
            z = np.asarray(z, dtype=float).reshape(-1)
            best, best_push = None, -1.0
            for _ in range(k):
                cand = sample_pi(bound, rng, boundary=True)
                push = float(np.linalg.norm(cand @ z))
                if push > best_push:
                    best, best_push = cand, push
            return best

        return gen_adv

    raise ValueError(f"unknown scheduling kind {kind!r}")
