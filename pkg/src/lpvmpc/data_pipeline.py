"""Offline data generation, validation and persistence.

A dataset is the triple of matrices

    U = [u_0 ... u_{T-1}],  X = [x_0 ... x_T],  Z = [z_0 ... z_T-1]

recorded from one trajectory of the plant under a hidden scheduling
sequence.  Columns of Z with near-zero norm carry no information about the
scheduling matrix and break the per-sample consistency construction, so
generation truncates the trajectory at the first such column (with a
warning) rather than keeping it.
"""

from __future__ import annotations

import dataclasses
import os
import warnings

import numpy as np

from lpvmpc.lpv_model import LpvPlant, in_pi, output, scheduling_generator, step

# Columns of Z at or below this norm are treated as uninformative.
TAU_Z = 1e-8

_FORMAT_TAG = "lpv-dataset"
_FORMAT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class DataSet:
    """Immutable input-state-output data matrices.

    U is n_u x T, X is n_x x (T+1), Z is n_z x T.  T = 0 is permitted (an
    empty dataset makes downstream consistency checks vacuous); generation
    always produces T >= 1.
    """

    U: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        u = np.atleast_2d(np.array(self.U, dtype=float))
        x = np.atleast_2d(np.array(self.X, dtype=float))
        z = np.atleast_2d(np.array(self.Z, dtype=float))
        t = u.shape[1]
        if x.shape[1] != t + 1:
            raise ValueError(f"X must have T+1={t + 1} columns, got {x.shape[1]}")
        if z.shape[1] != t:
            raise ValueError(f"Z must have T={t} columns, got {z.shape[1]}")
        if not (np.isfinite(u).all() and np.isfinite(x).all() and np.isfinite(z).all()):
            raise ValueError("dataset contains non-finite entries")
        if t > 0:
            norms = np.linalg.norm(z, axis=0)
            bad = np.flatnonzero(norms <= TAU_Z)
            if bad.size:
                warnings.warn(
                    f"dataset has {bad.size} z column(s) with norm <= {TAU_Z} "
                    f"(first at index {bad[0]}); consistency checks will be "
                    "ill-conditioned there", RuntimeWarning, stacklevel=2)
        for m in (u, x, z):
            m.setflags(write=False)
        object.__setattr__(self, "U", u)
        object.__setattr__(self, "X", x)
        object.__setattr__(self, "Z", z)

    @property
    def T(self) -> int:
        return self.U.shape[1]

    @property
    def n_x(self) -> int:
        return self.X.shape[0]

    @property
    def n_u(self) -> int:
        return self.U.shape[0]

    @property
    def n_z(self) -> int:
        return self.Z.shape[0]

    def prefix(self, t: int) -> "DataSet":
        """The dataset restricted to its first t samples."""
        if not 0 <= t <= self.T:
            raise ValueError(f"prefix length must be in [0, {self.T}], got {t}")
        return DataSet(self.U[:, :t], self.X[:, :t + 1], self.Z[:, :t])


def from_trajectory(U, X, C, D) -> DataSet:
    """Build a DataSet from raw input/state matrices, computing Z = C X + D U."""
    u = np.atleast_2d(np.asarray(U, dtype=float))
    x = np.atleast_2d(np.asarray(X, dtype=float))
    c = np.atleast_2d(np.asarray(C, dtype=float))
    d = np.atleast_2d(np.asarray(D, dtype=float))
    z = c @ x[:, :u.shape[1]] + d @ u
    return DataSet(u, x, z)


def initial_state_in_ellipsoid(s_x, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the ellipsoid {x : x^T S_x x <= 1}.

    Uses one Gaussian direction plus one radial uniform variate; the
    radius is the n_x-th root of the uniform so the draw is uniform in
    volume.
    """
    s = np.atleast_2d(np.asarray(s_x, dtype=float))
    n = s.shape[0]
    chol = np.linalg.cholesky(s)
    w = rng.standard_normal(n)
    nw = np.linalg.norm(w)
    if nw == 0.0:
        w = np.ones(n)
        nw = np.linalg.norm(w)
    w /= nw
    r = float(rng.uniform()) ** (1.0 / n)
    return np.linalg.solve(chol.T, r * w)


def _input_law(spec, n_u):
    """Input law from a spec dict or callable: (t, rng) -> u vector."""
    if callable(spec):
        return spec
    if spec is None:
        spec = {"kind": "uniform", "low": -1.0, "high": 1.0}
    kind = spec.get("kind")
    if kind == "uniform":
        lo, hi = float(spec.get("low", -1.0)), float(spec.get("high", 1.0))
        if not hi >= lo:
            raise ValueError("input law needs high >= low")

        def law_uniform(t, rng):
            return rng.uniform(lo, hi, size=n_u)

        return law_uniform
    if kind == "constant":
        value = np.asarray(spec.get("value", np.zeros(n_u)), dtype=float).reshape(-1)
        if value.shape != (n_u,):
            raise ValueError(f"constant input must have length {n_u}")

        def law_constant(t, rng):
            return value

        return law_constant
    raise ValueError(f"unknown input law kind {spec.get('kind')!r}")


def generate(plant: LpvPlant, T: int, input_law=None, sched_law=None,
             x0=None, seed: int = 0, s_x=None):
    """Generate a length-T dataset from the plant under hidden scheduling.

    Returns (DataSet, deltas) where deltas has shape (T, n_x, n_z) and
    holds the scheduling matrices actually used; they are returned only so
    verification can replay the trajectory, and are not part of the
    dataset.

    Randomness is split over three independent substreams keyed on
    (seed, 10) for the initial state, (seed, 11) for inputs and (seed, 12)
    for scheduling, with exactly one call per step and stream, so a longer
    run with the same seed extends a shorter one sample-for-sample.

    x0 defaults to a uniform draw from the state-constraint ellipsoid,
    which requires passing its shape matrix s_x.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    dims = plant.dims
    rng_x0 = np.random.default_rng((seed, 10))
    rng_u = np.random.default_rng((seed, 11))
    rng_sched = np.random.default_rng((seed, 12))

    if x0 is None:
        if s_x is None:
            raise ValueError("pass x0 explicitly or s_x to draw it from the "
                             "state-constraint ellipsoid")
        x0 = initial_state_in_ellipsoid(s_x, rng_x0)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (dims.n_x,):
        raise ValueError(f"x0 must have length {dims.n_x}")

    law = _input_law(input_law, dims.n_u)
    if sched_law is None:
        sched_law = {"kind": "uniform_iid"}
    gen = scheduling_generator(sched_law, plant.bound)

    X = np.zeros((dims.n_x, T + 1))
    U = np.zeros((dims.n_u, T))
    deltas = np.zeros((T, dims.n_x, dims.n_z))
    X[:, 0] = x0
    kept = T
    for t in range(T):
        u = np.asarray(law(t, rng_u), dtype=float).reshape(-1)
        if u.shape != (dims.n_u,):
            raise ValueError(f"input law must return a vector of length {dims.n_u}")
        z = output(plant, X[:, t], u)
        if np.linalg.norm(z) <= TAU_Z:
            warnings.warn(
                f"z norm {np.linalg.norm(z):.3e} at sample {t} is at or below "
                f"{TAU_Z}; truncating the dataset to T={t}",
                RuntimeWarning, stacklevel=2)
            kept = t
            break
        delta = np.asarray(gen(t, X[:, t], z, rng_sched), dtype=float)
        if not in_pi(delta, plant.bound):
            raise RuntimeError("scheduling law produced a matrix outside the bound")
        U[:, t] = u
        deltas[t] = delta
        X[:, t + 1] = plant.A_s @ X[:, t] + plant.B_s @ u + delta @ z
    if kept == 0:
        raise ValueError("first sample already violates the informativity "
                         "threshold; z_0 = C x_0 + D u_0 is numerically zero")
    ds = from_trajectory(U[:, :kept], X[:, :kept + 1], plant.C, plant.D)
    return ds, deltas[:kept]


def replay_residual(plant: LpvPlant, ds: DataSet, deltas) -> float:
    """Max norm of x_{t+1} - A_s x_t - B_s u_t - Delta_t z_t over the dataset."""
    deltas = np.asarray(deltas, dtype=float)
    worst = 0.0
    for t in range(ds.T):
        pred = step(plant, ds.X[:, t], ds.U[:, t], deltas[t])
        worst = max(worst, float(np.linalg.norm(ds.X[:, t + 1] - pred)))
    return worst


@dataclasses.dataclass(frozen=True)
class ValidationReport:
    """Report-only dataset diagnostics."""

    z_norms: np.ndarray
    min_z_norm: float
    tau_z: float
    norms_ok: bool
    recompute_residual: float
    rank_xu: int
    full_row_rank: bool
    messages: tuple

    @property
    def ok(self) -> bool:
        """Pass/fail is defined by the informativity threshold alone."""
        return self.norms_ok


def validate(ds: DataSet, C, D) -> ValidationReport:
    """Check informativity and internal consistency of a dataset.

    Reports per-column z norms against TAU_Z, the residual between the
    stored Z and C X + D U, and the row rank of [X_{0:T-1}; U].  The rank
    is diagnostic only: the downstream program can be feasible or
    infeasible at any rank, so no pass/fail is attached to it.
    """
    c = np.atleast_2d(np.asarray(C, dtype=float))
    d = np.atleast_2d(np.asarray(D, dtype=float))
    msgs = []
    if ds.T == 0:
        return ValidationReport(
            z_norms=np.zeros(0), min_z_norm=float("inf"), tau_z=TAU_Z,
            norms_ok=True, recompute_residual=0.0, rank_xu=0,
            full_row_rank=False, messages=("dataset is empty",))
    z_norms = np.linalg.norm(ds.Z, axis=0)
    min_norm = float(z_norms.min())
    norms_ok = bool(min_norm > TAU_Z)
    if not norms_ok:
        for i in np.flatnonzero(z_norms <= TAU_Z):
            msgs.append(f"z column {i} has norm {z_norms[i]:.3e} <= {TAU_Z}")
    recomputed = c @ ds.X[:, :ds.T] + d @ ds.U
    residual = float(np.abs(recomputed - ds.Z).max())
    if residual != 0.0:
        msgs.append(f"Z differs from C X + D U by {residual:.3e}")
    stacked = np.vstack([ds.X[:, :ds.T], ds.U])
    rank = int(np.linalg.matrix_rank(stacked))
    full = rank == stacked.shape[0]
    if not full:
        msgs.append(f"[X; U] has row rank {rank} < {stacked.shape[0]} (diagnostic only)")
    return ValidationReport(
        z_norms=z_norms, min_z_norm=min_norm, tau_z=TAU_Z, norms_ok=norms_ok,
        recompute_residual=residual, rank_xu=rank, full_row_rank=full,
        messages=tuple(msgs))


def _write_hex_rows(lines, tag, m):
    for i in range(m.shape[0]):
        parts = [tag, str(i)]
        parts.extend(float(v).hex() for v in m[i])
        lines.append(",".join(parts))


def save_dataset(ds: DataSet, path: str) -> None:
    """Write a dataset as CSV with hex-float values (lossless round-trip).

    The write is atomic: data goes to a temporary file first and is moved
    into place afterwards.
    """
    lines = [f"{_FORMAT_TAG},{_FORMAT_VERSION}",
             f"dims,{ds.n_x},{ds.n_u},{ds.n_z},{ds.T}"]
    _write_hex_rows(lines, "U", ds.U)
    _write_hex_rows(lines, "X", ds.X)
    _write_hex_rows(lines, "Z", ds.Z)
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_dataset(path: str) -> DataSet:
    """Read a dataset written by save_dataset."""
    with open(path, "r") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    head = lines[0].split(",")
    if head[0] != _FORMAT_TAG:
        raise ValueError(f"{path} is not a dataset file")
    if int(head[1]) != _FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {head[1]}")
    dims_row = lines[1].split(",")
    if dims_row[0] != "dims":
        raise ValueError("missing dims row")
    n_x, n_u, n_z, t = (int(v) for v in dims_row[1:5])
    mats = {"U": np.zeros((n_u, t)), "X": np.zeros((n_x, t + 1)),
            "Z": np.zeros((n_z, t))}
    for ln in lines[2:]:
        parts = ln.split(",")
        tag, row = parts[0], int(parts[1])
        if tag not in mats:
            raise ValueError(f"unknown section {tag!r}")
        vals = [float.fromhex(v) for v in parts[2:]]
        if len(vals) != mats[tag].shape[1]:
            raise ValueError(f"row length mismatch in section {tag}")
        mats[tag][row] = vals
    return DataSet(mats["U"], mats["X"], mats["Z"])
