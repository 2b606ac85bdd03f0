"""Shared builders for the angular positioning test system."""

import numpy as np

from lpvmpc import LpvPlant, MpcIngredients, SchedulingBound

X0 = np.array([0.05, 0.0])


def preset_bound(c=1.0):
    eye = np.eye(2)
    return SchedulingBound(g11=-0.25 * (1.0 + c) * eye,
                           g12=(5.0 + 2.5 * c) * eye,
                           g22=-100.0 * eye)


def preset_plant(bound):
    return LpvPlant(A_s=np.array([[1.0, 0.1], [0.0, 1.0]]),
                    B_s=np.array([[0.0], [0.0787]]),
                    C=np.array([[0.0, 0.0], [0.0, -0.1]]),
                    D=np.zeros((2, 1)),
                    bound=bound)


def preset_ingredients():
    return MpcIngredients(Q=np.eye(2), R=0.01 * np.eye(1),
                          S_u=0.16 * np.eye(1), S_x=4.0 * np.eye(2))


def preset_sched(c=1.0):
    return {"kind": "interval_uniform", "low": 0.05, "high": 0.05 + 0.05 * c}


def preset_config(c=1.0, T=20, seed=3, steps=100, seeds=(0,), sweep=None):
    cfg = {
        "schema": 1,
        "plant": {"preset": "angular_positioning"},
        "bound": {"kind": "c_scaled", "c": c},
        "data": {"T": T, "seed": seed},
        "run": {"x0": [0.05, 0.0], "steps": steps, "seeds": list(seeds)},
    }
    if sweep is not None:
        cfg["sweep"] = sweep
    return cfg
