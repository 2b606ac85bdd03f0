import time

import numpy as np
import pytest

from lpvmpc import SolverOptions, assemble, extract, generate, run, solve

from helpers import (X0, preset_bound, preset_ingredients, preset_plant,
                     preset_sched)


@pytest.fixture(scope="session")
def canon():
    """The c=1 reference setup with its seed-3, T=20 dataset."""
    bound = preset_bound(1.0)
    plant = preset_plant(bound)
    ing = preset_ingredients()
    ds, deltas = generate(plant, 20, sched_law=preset_sched(1.0), seed=3,
                          s_x=ing.S_x)
    return {"bound": bound, "plant": plant, "ing": ing, "ds": ds,
            "deltas": deltas, "x0": X0.copy(), "sched": preset_sched(1.0)}


@pytest.fixture(scope="session")
def canon_sol0(canon):
    """Optimal solution at x0 on the reference dataset."""
    prob = assemble(canon["x0"], canon["ds"], canon["bound"], canon["ing"],
                    cd=(canon["plant"].C, canon["plant"].D))
    sol = extract(prob, solve(prob.to_request(SolverOptions())))
    assert sol.status == "optimal"
    return sol


@pytest.fixture(scope="session")
def crit1_traces(canon):
    """Ten 100-step closed-loop runs (loop seeds 0..9) plus wall time."""
    t0 = time.time()
    traces = [run(canon["plant"], canon["ds"], canon["ing"], canon["x0"],
                  100, sched_gen=canon["sched"], seed=s) for s in range(10)]
    return traces, time.time() - t0


@pytest.fixture(scope="session")
def crit3_sweep():
    """c sweep: per-point data seed 3+k, fixed loop seed 0."""
    ing = preset_ingredients()
    out = []
    for k, c in enumerate([0.4, 0.8, 1.2, 1.6, 2.0]):
        bound = preset_bound(c)
        plant = preset_plant(bound)
        sched = preset_sched(c)
        ds, _ = generate(plant, 20, sched_law=sched, seed=3 + k, s_x=ing.S_x)
        trace = run(plant, ds, ing, X0.copy(), 100, sched_gen=sched, seed=0)
        out.append({"c": c, "bound": bound, "plant": plant, "ds": ds,
                    "trace": trace})
    return out


@pytest.fixture(scope="session")
def crit4_sweep(canon):
    """T sweep on nested prefixes of the reference dataset, loop seed 0."""
    out = []
    for T in (3, 5, 10, 20):
        ds = canon["ds"].prefix(T)
        trace = run(canon["plant"], ds, canon["ing"], canon["x0"], 100,
                    sched_gen=canon["sched"], seed=0)
        out.append({"T": T, "ds": ds, "trace": trace})
    return out
