"""Receding-horizon operation of the data-driven min-max controller.

Each step measures the state, assembles and solves the synthesis SDP,
applies u_t = F* x_t, advances the plant under a scheduling matrix drawn
from the configured generator, and records costs, solver outcomes and
constraint slacks.  A trace also keeps every per-step solution so the
stability and feasibility certificates can be audited after the fact.

The closed loop stops early only when a solve comes back non-optimal.
Infeasibility at the very first step is an expected outcome for short
datasets and yields an empty trace; infeasibility after a feasible start
contradicts the recursive-feasibility guarantee and is flagged loudly.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np

from lpvmpc.data_pipeline import DataSet
from lpvmpc.lpv_model import (
    LpvPlant,
    in_pi,
    output,
    scheduling_generator,
    step as plant_step,
)
from lpvmpc.sdp_assembly import (
    EPS_SCALE,
    MpcIngredients,
    assemble,
    extract,
)
from lpvmpc.solver_backend import SolverOptions, solve

# Flag text used when a solve fails after a feasible start.  This must
# never happen for valid inputs; it marks a bug, not an expected path.
GUARANTEE_VIOLATION = ("GUARANTEE VIOLATION: optimization became "
                       "infeasible after a feasible start")


@dataclasses.dataclass(frozen=True)
class StepRecord:
    """One executed (or attempted) step of the closed loop.

    decrease_value = x_{t+1}^T P_t x_{t+1} - x_t^T P_t x_t
                     + lambda_min(Q) ||x_t||^2,
    which the stability argument keeps nonpositive; slack_u and slack_x
    are 1 - ||u||_{S_u}^2 and 1 - ||x||_{S_x}^2 (nonnegative means the
    constraint holds).  A non-optimal status leaves the input-dependent
    fields as nan.
    """

    t: int
    x: np.ndarray
    u: np.ndarray
    stage_cost: float
    gamma: float
    decrease_value: float
    status: str
    solve_time: float
    slack_u: float
    slack_x: float
    acc_cost: float

    def __post_init__(self):
        for name in ("x", "u"):
            v = np.array(getattr(self, name), dtype=float).reshape(-1)
            v.setflags(write=False)
            object.__setattr__(self, name, v)


@dataclasses.dataclass(frozen=True)
class ClosedLoopTrace:
    """Recorded closed-loop run.

    records holds one StepRecord per attempted step, contiguous from
    t = 0; solutions holds the per-step SDP solutions in the same order.
    states has one column per visited state including the final one, so
    it is one longer than the number of applied (optimal) steps.  deltas
    stacks the realized scheduling matrices for the applied steps.
    flags collects human-readable anomaly notes; an empty tuple means a
    clean run.
    """

    records: tuple
    solutions: tuple
    states: np.ndarray
    deltas: np.ndarray
    flags: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "solutions", tuple(self.solutions))
        object.__setattr__(self, "flags", tuple(self.flags))
        states = np.array(self.states, dtype=float)
        states.setflags(write=False)
        object.__setattr__(self, "states", states)
        deltas = np.array(self.deltas, dtype=float)
        deltas.setflags(write=False)
        object.__setattr__(self, "deltas", deltas)
        for i, r in enumerate(self.records):
            if r.t != i:
                raise ValueError("records must be contiguous in t from 0")
        accs = [r.acc_cost for r in self.records]
        if any(b < a for a, b in zip(accs, accs[1:])):
            raise ValueError("accumulated cost must be nondecreasing")

    @property
    def n_steps(self) -> int:
        return len(self.records)

    @property
    def n_applied(self) -> int:
        return sum(1 for r in self.records if r.status == "optimal")

    @property
    def acc_cost(self) -> float:
        return self.records[-1].acc_cost if self.records else 0.0

    @property
    def completed(self) -> bool:
        return not self.flags


def run(plant: LpvPlant, ds: DataSet, ing: MpcIngredients, x0, steps: int,
        sched_gen=None, seed: int = 0, *, eps_scale: float = EPS_SCALE,
        options: SolverOptions = SolverOptions()) -> ClosedLoopTrace:
    """Run the closed loop for `steps` steps from x0.

    sched_gen is a scheduling generator spec or callable as accepted by
    scheduling_generator; None draws an independent matrix from the
    bound at every step.  The generator's randomness comes from the
    dedicated substream (seed, 13), so loop realizations are decoupled
    from dataset generation with the same seed.

    Returns a trace of length 0 (no records) when the first solve is
    infeasible.  A non-optimal solve at t > 0 appends a flagged record
    and stops; every realized scheduling matrix is checked against the
    bound and a violation raises RuntimeError.
    """
    x = np.asarray(x0, dtype=float).reshape(-1)
    dims = plant.dims
    if x.shape != (dims.n_x,):
        raise ValueError(f"x0 must have length {dims.n_x}")
    if not np.isfinite(x).all():
        raise ValueError("x0 must be finite")
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    rng = np.random.default_rng((seed, 13))
    gen = scheduling_generator(
        sched_gen if sched_gen is not None else {"kind": "uniform_iid"},
        plant.bound)
    lam_min_q = float(np.linalg.eigvalsh(ing.Q)[0])
    cd = (plant.C, plant.D)

    records = []
    solutions = []
    states = [x.copy()]
    deltas = []
    flags = []
    acc = 0.0
    nan_u = np.full(dims.n_u, np.nan)

    for t in range(steps):
        eps = eps_scale * (1.0 + float(np.linalg.norm(x)))
        prob = assemble(x, ds, plant.bound, ing, eps=eps, cd=cd)
        sol = extract(prob, solve(prob.to_request(options)))
        solutions.append(sol)
        if sol.status != "optimal":
            if t == 0 and sol.status == "infeasible":
                flags.append("infeasible at step 0")
                break
            if sol.status == "infeasible":
                flags.append(GUARANTEE_VIOLATION)
            else:
                flags.append(f"solver numerical failure at step {t}")
            records.append(StepRecord(
                t=t, x=x, u=nan_u, stage_cost=np.nan, gamma=np.nan,
                decrease_value=np.nan, status=sol.status,
                solve_time=sol.solver_result.solve_time, slack_u=np.nan,
                slack_x=1.0 - float(x @ ing.S_x @ x), acc_cost=acc))
            break
        u = sol.F @ x
        z = output(plant, x, u)
        delta = np.asarray(gen(t, x, z, rng), dtype=float)
        if not in_pi(delta, plant.bound):
            raise RuntimeError(
                f"scheduling generator left the bound at step {t}")
        x_next = plant_step(plant, x, u, delta)
        stage = float(x @ ing.Q @ x + u @ ing.R @ u)
        acc += stage
        decrease = float(x_next @ sol.P @ x_next - x @ sol.P @ x
                         + lam_min_q * (x @ x))
        records.append(StepRecord(
            t=t, x=x, u=u, stage_cost=stage, gamma=sol.gamma,
            decrease_value=decrease, status="optimal",
            solve_time=sol.solver_result.solve_time,
            slack_u=1.0 - float(u @ ing.S_u @ u),
            slack_x=1.0 - float(x @ ing.S_x @ x), acc_cost=acc))
        deltas.append(delta)
        states.append(x_next)
        x = x_next

    return ClosedLoopTrace(
        records=tuple(records), solutions=tuple(solutions),
        states=np.array(states).T,
        deltas=(np.array(deltas) if deltas
                else np.empty((0, dims.n_x, dims.n_z))),
        flags=tuple(flags))


def run_external(ds: DataSet, bound, ing: MpcIngredients, cd, steps: int,
                 infile, outfile, *, eps_scale: float = EPS_SCALE,
                 options: SolverOptions = SolverOptions()) -> ClosedLoopTrace:
    """Drive an external plant over a line-based text protocol.

    The controller first reads x_0 from `infile` (whitespace-separated
    decimals, one vector per line), then alternates: write u_t to
    `outfile` (flushed), read x_{t+1}.  The plant process owns the
    scheduling signal, so the returned trace has an empty deltas stack
    and no bound check on the realized transitions.

    infile and outfile are open text streams, or paths (a fifo works);
    paths are opened here, reader first to match a peer that opens its
    write end first.  cd is the (C, D) pair of the scheduling channel,
    needed to assemble the SDP; dimensions come from the dataset.
    """
    if isinstance(infile, (str, os.PathLike)):
        with open(infile, "r", encoding="ascii") as fin:
            return run_external(ds, bound, ing, cd, steps, fin, outfile,
                                eps_scale=eps_scale, options=options)
    if isinstance(outfile, (str, os.PathLike)):
        with open(outfile, "w", encoding="ascii") as fout:
            return run_external(ds, bound, ing, cd, steps, infile, fout,
                                eps_scale=eps_scale, options=options)
    n_x = ds.n_x

    def read_vec(n):
        line = infile.readline()
        if not line:
            raise EOFError("external plant closed the stream")
        v = np.array([float(tok) for tok in line.split()], dtype=float)
        if v.shape != (n,):
            raise ValueError(f"expected {n} values, got {v.shape[0]}")
        return v

    x = read_vec(n_x)
    lam_min_q = float(np.linalg.eigvalsh(ing.Q)[0])
    records = []
    solutions = []
    states = [x.copy()]
    flags = []
    acc = 0.0
    nan_u = np.full(ing.n_u, np.nan)

    for t in range(steps):
        eps = eps_scale * (1.0 + float(np.linalg.norm(x)))
        prob = assemble(x, ds, bound, ing, eps=eps, cd=cd)
        sol = extract(prob, solve(prob.to_request(options)))
        solutions.append(sol)
        if sol.status != "optimal":
            if t == 0 and sol.status == "infeasible":
                flags.append("infeasible at step 0")
                break
            flags.append(GUARANTEE_VIOLATION if sol.status == "infeasible"
                         else f"solver numerical failure at step {t}")
            records.append(StepRecord(
                t=t, x=x, u=nan_u, stage_cost=np.nan, gamma=np.nan,
                decrease_value=np.nan, status=sol.status,
                solve_time=sol.solver_result.solve_time, slack_u=np.nan,
                slack_x=1.0 - float(x @ ing.S_x @ x), acc_cost=acc))
            break
        u = sol.F @ x
        outfile.write(" ".join(repr(float(v)) for v in u) + "\n")
        outfile.flush()
        x_next = read_vec(n_x)
        stage = float(x @ ing.Q @ x + u @ ing.R @ u)
        acc += stage
        decrease = float(x_next @ sol.P @ x_next - x @ sol.P @ x
                         + lam_min_q * (x @ x))
        records.append(StepRecord(
            t=t, x=x, u=u, stage_cost=stage, gamma=sol.gamma,
            decrease_value=decrease, status="optimal",
            solve_time=sol.solver_result.solve_time,
            slack_u=1.0 - float(u @ ing.S_u @ u),
            slack_x=1.0 - float(x @ ing.S_x @ x), acc_cost=acc))
        states.append(x_next)
        x = x_next

    return ClosedLoopTrace(
        records=tuple(records), solutions=tuple(solutions),
        states=np.array(states).T,
        deltas=np.empty((0, n_x, ds.n_z)), flags=tuple(flags))


def check_step_certificate(trace: ClosedLoopTrace, t: int,
                           tol: float | None = None) -> dict:
    """Audit the stability certificates for the step pair (t, t+1).

    Checks, each against tol (default 1e-6 times the first step's
    optimal value):

    a. Lyapunov decrease: the recorded decrease_value at t is <= tol.
    b. Feasibility inheritance: x_{t+1}^T P_t x_{t+1} <= gamma_t + tol.
    c. Value monotonicity:
       x_{t+1}^T P_{t+1} x_{t+1} <= x_{t+1}^T P_t x_{t+1} + tol.

    Both solves must be optimal.  Report-only: returns a dict with the
    three values, the tolerance and an overall `passed` flag.
    """
    n_applied = trace.n_applied
    if not 0 <= t < n_applied - 1 or len(trace.solutions) <= t + 1:
        raise ValueError("certificate check needs optimal solves at t, t+1")
    sol_t = trace.solutions[t]
    sol_next = trace.solutions[t + 1]
    if sol_t.status != "optimal" or sol_next.status != "optimal":
        raise ValueError("certificate check needs optimal solves at t, t+1")
    if tol is None:
        tol = 1e-6 * trace.solutions[0].gamma
    x_next = trace.states[:, t + 1]
    v_inherit = float(x_next @ sol_t.P @ x_next)
    v_next = float(x_next @ sol_next.P @ x_next)
    decrease = trace.records[t].decrease_value
    inherit = v_inherit - trace.records[t].gamma
    monotone = v_next - v_inherit
    return {
        "t": t,
        "tol": float(tol),
        "decrease": float(decrease),
        "inherit": float(inherit),
        "monotone": float(monotone),
        "passed": bool(decrease <= tol and inherit <= tol
                       and monotone <= tol),
    }


def _trace_columns(n_x, n_u):
    cols = ["t"]
    cols += [f"x{i}" for i in range(n_x)]
    cols += [f"u{i}" for i in range(n_u)]
    cols += ["stage_cost", "gamma", "decrease_value", "status",
             "solve_time", "slack_u", "slack_x", "acc_cost"]
    return cols


def save_trace(trace: ClosedLoopTrace, path: str) -> None:
    """Write a trace as CSV, one row per record plus a terminal row.

    Floats are rendered with repr so a reload is bit-exact.  The
    terminal row (status `terminal`) carries the final state and nan
    elsewhere; for a run stopped by a failed solve it repeats the last
    measured state.
    """
    n_x = trace.states.shape[0]
    n_u = trace.records[0].u.shape[0] if trace.records else 1
    lines = [",".join(_trace_columns(n_x, n_u))]

    def fmt(v):
        return repr(float(v))

    for r in trace.records:
        row = [str(r.t)]
        row += [fmt(v) for v in r.x]
        row += [fmt(v) for v in r.u]
        row += [fmt(r.stage_cost), fmt(r.gamma), fmt(r.decrease_value),
                r.status, fmt(r.solve_time), fmt(r.slack_u),
                fmt(r.slack_x), fmt(r.acc_cost)]
        lines.append(",".join(row))
    x_final = trace.states[:, -1]
    row = [str(trace.states.shape[1] - 1)]
    row += [fmt(v) for v in x_final]
    row += [fmt(np.nan)] * n_u
    row += [fmt(np.nan), fmt(np.nan), fmt(np.nan), "terminal",
            fmt(np.nan), fmt(np.nan), fmt(np.nan), fmt(np.nan)]
    lines.append(",".join(row))
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_trace(path: str) -> dict:
    """Read a trace CSV back into plain arrays.

    Returns a dict with X (states including the final one, one column
    per visited state), U, and per-step vectors for the applied steps,
    plus the status column over all non-terminal rows.  This is the
    artifact form consumed by the verification front end; the full
    in-memory trace (with solutions) is not reconstructed.
    """
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    header = lines[0].split(",")
    n_x = sum(1 for c in header if c.startswith("x") and c[1:].isdigit())
    n_u = sum(1 for c in header if c.startswith("u") and c[1:].isdigit())
    i_status = header.index("status")
    rows = [ln.split(",") for ln in lines[1:]]
    term = [r for r in rows if r[i_status] == "terminal"]
    if len(term) != 1:
        raise ValueError("trace file must contain exactly one terminal row")
    recs = [r for r in rows if r[i_status] != "terminal"]
    applied = [r for r in recs if r[i_status] == "optimal"]
    x_cols = [header.index(f"x{i}") for i in range(n_x)]
    u_cols = [header.index(f"u{i}") for i in range(n_u)]

    def col(rows_, name):
        j = header.index(name)
        return np.array([float(r[j]) for r in rows_])

    x_states = [[float(r[j]) for j in x_cols] for r in applied]
    x_states.append([float(term[0][j]) for j in x_cols])
    return {
        "X": np.array(x_states).T,
        "U": np.array([[float(r[j]) for j in u_cols] for r in applied]).T,
        "t": np.array([int(r[0]) for r in recs]),
        "status": [r[i_status] for r in recs],
        "stage_cost": col(applied, "stage_cost"),
        "gamma": col(applied, "gamma"),
        "decrease_value": col(applied, "decrease_value"),
        "solve_time": col(applied, "solve_time"),
        "slack_u": col(applied, "slack_u"),
        "slack_x": col(applied, "slack_x"),
        "acc_cost": col(applied, "acc_cost"),
    }
