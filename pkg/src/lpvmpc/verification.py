"""Monte-Carlo oracles for the controller's stability and cost guarantees.

Each oracle independently re-evaluates one link of the argument behind
the synthesis SDP at a returned solution:

* check_decrease_inequality: the closed-loop Lyapunov LMI
  (A+BF+Delta(C+DF))^T P (A+BF+Delta(C+DF)) - P + Q + F^T R F < 0
  over sampled scheduling matrices and consistent systems.
* check_cost_upper_bound: gamma really upper-bounds realized rollout
  costs of the fixed gain F under random or adversarial scheduling.
* check_schur_chain: the Schur-complement chain that connects the big
  synthesis LMI to the Lyapunov LMI, plus the multiplier inequality at
  the solution's (alpha, lambda).

The oracles are falsifiers, not proofs: they sample, they do not
enumerate.  All are pure functions of (inputs, seed).
"""

from __future__ import annotations

import dataclasses

import numpy as np

from lpvmpc.consistency_set import ConsistencyCertificate, in_sigma
from lpvmpc.consistency_set import sample_matrices
from lpvmpc.data_pipeline import DataSet
from lpvmpc.lpv_model import LpvPlant, SchedulingBound, sample_pi_batch
from lpvmpc.sdp_assembly import MpcIngredients, SdpSolution

# Default absolute tolerance on eigenvalue margins, consistent with the
# solver's feasibility tolerance.
MARGIN_TOL = 1e-7

# Fraction of scheduling samples drawn on the boundary of the bound set,
# where the decrease inequality is tightest.
BOUNDARY_FRACTION = 0.5

_MAX_WITNESSES = 5


@dataclasses.dataclass(frozen=True)
class OracleReport:
    """Outcome of one Monte-Carlo oracle.

    worst_margin is signed: positive means the property held with room
    to spare on every sample.  Non-strict oracles pass iff
    worst_margin >= -tol; strict ones (used where the underlying
    inequality is strict) pass iff worst_margin > 0.  witnesses holds
    up to five failing inputs for debugging.
    """

    name: str
    samples: int
    worst_margin: float
    tol: float
    passed: bool
    strict: bool = False
    witnesses: tuple = ()
    details: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        expected = (self.worst_margin > 0.0 if self.strict
                    else self.worst_margin >= -self.tol)
        if self.passed != expected:
            raise ValueError("passed flag inconsistent with worst_margin")
        object.__setattr__(self, "witnesses",
                           tuple(self.witnesses)[:_MAX_WITNESSES])


def _systems_and_channel(systems, cd):
    """Normalize the `systems` argument to ((A, B) pairs, C, D)."""
    if isinstance(systems, LpvPlant):
        return [(systems.A_s, systems.B_s)], systems.C, systems.D
    if cd is None:
        raise ValueError("cd=(C, D) is required when systems is a list")
    c_mat = np.asarray(cd[0], dtype=float)
    d_mat = np.asarray(cd[1], dtype=float)
    pairs = []
    for a, b in systems:
        pairs.append((np.atleast_2d(np.asarray(a, dtype=float)),
                      np.atleast_2d(np.asarray(b, dtype=float))))
    return pairs, c_mat, d_mat


def check_decrease_inequality(sol: SdpSolution, systems, bound: SchedulingBound,
                              ing: MpcIngredients, n_samples: int = 1000,
                              seed: int = 0, *, cd=None, ds: DataSet | None = None,
                              tol: float = MARGIN_TOL, strict: bool = True,
                              boundary_fraction: float = BOUNDARY_FRACTION
                              ) -> OracleReport:
    """Check the Lyapunov decrease LMI at an optimal solution.

    systems is either an LpvPlant (its true pair and channel are used)
    or a list of (A, B) pairs with the channel passed as cd=(C, D).
    When ds is given, every provided pair must lie in the consistency
    set of the data; a pair that does not is an input error.

    For each pair and each of n_samples scheduling matrices (the first
    boundary_fraction of them on the boundary of the bound set) the
    margin is minus the largest eigenvalue of

        (A+BF+Delta(C+DF))^T P (A+BF+Delta(C+DF)) - P + Q + F^T R F,

    so positive margins mean strict decrease.  Default strict mode
    requires worst margin > 0.
    """
    if sol.status != "optimal":
        raise ValueError("oracle requires an optimal solution")
    pairs, c_mat, d_mat = _systems_and_channel(systems, cd)
    if ds is not None:
        for k, (a, b) in enumerate(pairs):
            if not in_sigma(a, b, ds, bound):
                raise ValueError(
                    f"system pair {k} is not consistent with the data")
    rng = np.random.default_rng(seed)
    deltas = sample_pi_batch(bound, rng, n_samples, boundary_fraction)
    f = sol.F
    p = sol.P
    cost_term = ing.Q + f.T @ ing.R @ f - p
    cfd = c_mat + d_mat @ f
    worst = np.inf
    witnesses = []
    for k, (a, b) in enumerate(pairs):
        acl = (a + b @ f)[None, :, :] + deltas @ cfd
        lhs = np.einsum("nji,jk,nkl->nil", acl, p, acl) + cost_term
        margins = -np.linalg.eigvalsh(lhs)[:, -1]
        worst = min(worst, float(margins.min()))
        bad = np.nonzero(margins <= 0.0 if strict else margins < -tol)[0]
        for i in bad[:_MAX_WITNESSES - len(witnesses)]:
            witnesses.append({"system": k, "delta": deltas[i],
                              "margin": float(margins[i])})
    passed = worst > 0.0 if strict else worst >= -tol
    return OracleReport(
        name="decrease_inequality", samples=n_samples * len(pairs),
        worst_margin=worst, tol=tol, passed=passed, strict=strict,
        witnesses=tuple(witnesses),
        details={"n_systems": len(pairs),
                 "boundary_fraction": boundary_fraction})


def check_cost_upper_bound(sol: SdpSolution, plant: LpvPlant,
                           ing: MpcIngredients, horizon: int = 200,
                           n_rollouts: int = 100, seed: int = 0, *,
                           tol: float = MARGIN_TOL, sched: str = "random",
                           candidates: int = 100) -> OracleReport:
    """Check that gamma bounds realized fixed-gain rollout costs.

    Rolls out x+ = (A_s + B_s F) x + Delta (C + D F) x from the
    solution's state for `horizon` steps and n_rollouts scheduling
    realizations; the accumulated cost sum of x^T (Q + F^T R F) x must
    stay at or below gamma.  sched='greedy' replaces the random draw by
    a per-step adversary that picks, among `candidates` samples (half
    on the boundary), the matrix maximizing the next stage cost.

    The finite horizon truncates an infinite sum, so passing is
    necessary, not sufficient, for the true bound.
    """
    if sol.status != "optimal":
        raise ValueError("oracle requires an optimal solution")
    if sched not in ("random", "greedy"):
        raise ValueError("sched must be 'random' or 'greedy'")
    rng = np.random.default_rng(seed)
    f = sol.F
    k1 = plant.A_s + plant.B_s @ f
    k2 = plant.C + plant.D @ f
    qf = ing.Q + f.T @ ing.R @ f
    x = np.tile(sol.x_t, (n_rollouts, 1))
    costs = np.zeros(n_rollouts)
    if sched == "random":
        n = n_rollouts * horizon
        deltas = sample_pi_batch(bound=plant.bound, rng=rng, n=n)
        deltas = deltas.reshape(n_rollouts, horizon, *deltas.shape[1:])
        for t in range(horizon):
            costs += np.einsum("ri,ij,rj->r", x, qf, x)
            z = x @ k2.T
            x = x @ k1.T + np.einsum("rij,rj->ri", deltas[:, t], z)
    else:
        for t in range(horizon):
            costs += np.einsum("ri,ij,rj->r", x, qf, x)
            z = x @ k2.T
            cand = sample_pi_batch(plant.bound, rng, candidates,
                                   boundary_fraction=0.5)
            x_next = x @ k1.T + np.einsum("cij,rj->cri", cand, z)
            val = np.einsum("cri,ij,crj->cr", x_next, qf, x_next)
            best = np.argmax(val, axis=0)
            x = x_next[best, np.arange(n_rollouts)]
    max_cost = float(costs.max()) if n_rollouts else 0.0
    worst = (sol.gamma - max_cost) if n_rollouts else sol.gamma
    passed = worst >= -tol
    return OracleReport(
        name="cost_upper_bound", samples=n_rollouts,
        worst_margin=float(worst), tol=tol, passed=passed,
        details={"horizon": horizon, "sched": sched,
                 "max_cost": max_cost,
                 "mean_cost": float(costs.mean()) if n_rollouts else 0.0})


def check_schur_chain(sol: SdpSolution, bound: SchedulingBound,
                      ing: MpcIngredients, n_samples: int = 200,
                      seed: int = 0, *, ds: DataSet, plant: LpvPlant,
                      n_systems: int = 10, tol: float = MARGIN_TOL,
                      boundary_fraction: float = BOUNDARY_FRACTION
                      ) -> OracleReport:
    """Check the Schur-complement chain behind the big synthesis LMI.

    Three sub-checks at the solution, each reported in details:

    i.   value_bound: W = H - Phi^T Phi / gamma clears tol*I, where
         Phi = [M_R L; M_Q H] (raw margin: min eig of W minus tol).
    ii.  image_bound: H - N W^{-1} N^T is positive definite for sampled
         consistent (A, B) and scheduling Delta, with
         N = A H + B L + Delta (C H + D L).
    iii. multiplier: with V = [I; A^T; B^T; Delta^T], the contracted
         multiplier form V^T (M(alpha) + lambda*G) V is positive
         semidefinite at the solution's (alpha, lambda); M uses the
         same unit-norm rescaling of the data matrices as assembly.

    The report is strict; its worst_margin folds the three raw margins
    (the semidefinite one shifted by +tol) so that `passed` means i and
    ii hold strictly and iii holds within tol.
    """
    if sol.status != "optimal":
        raise ValueError("oracle requires an optimal solution")
    n_x, n_u, n_z = ds.n_x, ds.n_u, ds.n_z
    h, l, gamma = sol.H, sol.L, sol.gamma
    phi = np.vstack([ing.M_R @ l, ing.M_Q @ h])
    w_mat = h - phi.T @ phi / gamma
    raw1 = float(np.linalg.eigvalsh(w_mat)[0]) - tol
    details = {"value_bound": raw1, "image_bound": None, "multiplier": None}
    if raw1 <= 0.0:
        return OracleReport(
            name="schur_chain", samples=0, worst_margin=raw1, tol=tol,
            passed=False, strict=True, details=details)

    rng = np.random.default_rng(seed)
    pairs = sample_sigma(ds, bound, plant, n_systems, seed=seed + 1)
    deltas = sample_pi_batch(bound, rng, n_samples, boundary_fraction)

    ch_dl = plant.C @ h + plant.D @ l
    d_emb = 2 * n_x + n_u + n_z
    g_emb = np.zeros((d_emb, d_emb))
    g_emb[:n_x, :n_x] = bound.g11
    g_emb[:n_x, 2 * n_x + n_u:] = bound.g12
    g_emb[2 * n_x + n_u:, :n_x] = bound.g12.T
    g_emb[2 * n_x + n_u:, 2 * n_x + n_u:] = bound.g22
    if ds.T:
        mis = sample_matrices(ds, bound, normalize=True)
        m_alpha = np.einsum("i,ijk->jk", sol.alpha, mis)
    else:
        m_alpha = np.zeros((2 * n_x + n_u, 2 * n_x + n_u))
    s_mat = sol.lam * g_emb
    s_mat[:2 * n_x + n_u, :2 * n_x + n_u] += m_alpha

    raw2 = np.inf
    raw3 = np.inf
    witnesses = []
    v_stack = np.empty((n_samples, d_emb, n_x))
    for k, (a, b) in enumerate(pairs):
        n_mats = (a @ h + b @ l)[None, :, :] + deltas @ ch_dl
        inner = np.linalg.solve(w_mat, np.transpose(n_mats, (0, 2, 1)))
        chain = h[None, :, :] - n_mats @ inner
        m2 = np.linalg.eigvalsh(chain)[:, 0]
        v_stack[:, :n_x, :] = np.eye(n_x)
        v_stack[:, n_x:2 * n_x, :] = a.T
        v_stack[:, 2 * n_x:2 * n_x + n_u, :] = b.T
        v_stack[:, 2 * n_x + n_u:, :] = np.transpose(deltas, (0, 2, 1))
        mult = np.einsum("ndi,de,nej->nij", v_stack, s_mat, v_stack)
        m3 = np.linalg.eigvalsh(mult)[:, 0]
        raw2 = min(raw2, float(m2.min()))
        raw3 = min(raw3, float(m3.min()))
        bad = np.nonzero((m2 <= 0.0) | (m3 < -tol))[0]
        for i in bad[:_MAX_WITNESSES - len(witnesses)]:
            witnesses.append({"system": k, "delta": deltas[i],
                              "image_bound": float(m2[i]),
                              "multiplier": float(m3[i])})
    details["image_bound"] = raw2
    details["multiplier"] = raw3
    worst = min(raw1, raw2, raw3 + tol)
    return OracleReport(
        name="schur_chain", samples=n_samples * len(pairs),
        worst_margin=float(worst), tol=tol, passed=worst > 0.0,
        strict=True, witnesses=tuple(witnesses), details=details)


def sample_sigma(ds: DataSet, bound: SchedulingBound, plant: LpvPlant,
                 n: int, seed: int = 0) -> list:
    """Draw n system pairs (A, B) consistent with the data.

    The consistency set has no closed-form sampler, so this is
    accept/reject: candidates are the true pair, Gaussian perturbations
    of it with geometrically shrinking radius, and pairs re-explaining
    the data via least squares after redrawing an admissible scheduling
    sequence.  Every returned pair passes the consistency certificate;
    when all candidates for a slot are rejected the true pair is used,
    which keeps the sampler total.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    cert = ConsistencyCertificate.from_data(ds, bound)
    rng = np.random.default_rng(seed)
    anchor = (plant.A_s.copy(), plant.B_s.copy())
    if not cert.contains(*anchor):
        raise ValueError("true system pair fails the consistency check")
    n_x, n_u = ds.n_x, ds.n_u
    xu = np.vstack([ds.X[:, :ds.T], ds.U]) if ds.T else None
    pairs = []
    for k in range(n):
        if k == 0:
            pairs.append(anchor)
            continue
        accepted = None
        radius = 0.5
        for attempt in range(40):
            if attempt % 4 == 3 and ds.T:
                redrawn = sample_pi_batch(bound, rng, ds.T)
                rhs = (ds.X[:, 1:ds.T + 1]
                       - np.einsum("tij,jt->it", redrawn, ds.Z))
                theta = np.linalg.lstsq(xu.T, rhs.T, rcond=None)[0]
                cand = (theta[:n_x].T, theta[n_x:].T)
            else:
                da = rng.standard_normal((n_x, n_x))
                db = rng.standard_normal((n_x, n_u))
                scale = radius / max(1.0, float(np.linalg.norm(da)),
                                     float(np.linalg.norm(db)))
                cand = (anchor[0] + scale * da, anchor[1] + scale * db)
                radius *= 0.6
            if cert.contains(*cand):
                accepted = cand
                break
        pairs.append(accepted if accepted is not None
                     else (anchor[0].copy(), anchor[1].copy()))
    return pairs
