"""Data-driven min-max MPC for LPV systems with QMI-bounded scheduling.

The package characterizes every system consistent with a recorded
input-state trajectory, assembles a semidefinite program whose solution
gives a state feedback with a worst-case cost certificate, runs the
receding-horizon loop, and checks all claimed guarantees numerically.
"""

from lpvmpc.lpv_model import (
    Dimensions,
    LpvPlant,
    SchedulingBound,
    interval_bound,
    in_pi,
    sample_pi,
    scheduling_generator,
    step,
)
from lpvmpc.data_pipeline import DataSet, generate, load_dataset, save_dataset, validate
from lpvmpc.consistency_set import (
    ConsistencyCertificate,
    ProjectedQmi,
    build_m,
    build_ni,
    in_sigma,
    project_qmi,
    reconstruct_preimage,
)
from lpvmpc.sdp_assembly import MpcIngredients, SdpProblem, SdpSolution, assemble, extract
from lpvmpc.solver_backend import (
    SolverOptions,
    SolverRequest,
    SolverResult,
    export_request,
    import_request,
    solve,
)
from lpvmpc.mpc_loop import (
    ClosedLoopTrace,
    StepRecord,
    check_step_certificate,
    load_trace,
    run,
    run_external,
    save_trace,
)
from lpvmpc.verification import (
    OracleReport,
    check_cost_upper_bound,
    check_decrease_inequality,
    check_schur_chain,
    sample_sigma,
)

__version__ = "0.1.0"

__all__ = [
    "Dimensions",
    "SchedulingBound",
    "LpvPlant",
    "interval_bound",
    "in_pi",
    "sample_pi",
    "scheduling_generator",
    "step",
    "DataSet",
    "generate",
    "validate",
    "save_dataset",
    "load_dataset",
    "ProjectedQmi",
    "ConsistencyCertificate",
    "project_qmi",
    "reconstruct_preimage",
    "build_ni",
    "build_m",
    "in_sigma",
    "MpcIngredients",
    "SdpProblem",
    "SdpSolution",
    "assemble",
    "extract",
    "SolverRequest",
    "SolverResult",
    "SolverOptions",
    "solve",
    "export_request",
    "import_request",
    "ClosedLoopTrace",
    "StepRecord",
    "run",
    "run_external",
    "check_step_certificate",
    "save_trace",
    "load_trace",
    "OracleReport",
    "check_decrease_inequality",
    "check_cost_upper_bound",
    "check_schur_chain",
    "sample_sigma",
    "__version__",
]
