"""Neural ODEs: dual gradient pipelines, kernel depth recursions, training.

The package models a scalar-output network whose hidden state follows
``dh/dt = sigma_w W phi(h) / sqrt(n)`` over a time horizon, computes its
gradients both by the backward adjoint ODE and by exact backpropagation
through the Euler discretization, evaluates the infinite-width NNGP/NTK
limits of both via depth recursions, and trains the finite model by
full-batch gradient descent with spectral diagnostics.
"""

from .activations import (
    Activation,
    PairCovariance,
    activation_names,
    deriv_activation,
    dual_deriv,
    dual_value,
    eval_activation,
    get_activation,
    hermite_coeffs,
    nonpoly_witness,
)
from .data import (
    Dataset,
    RawImageSet,
    dataset_from_csv,
    dataset_to_csv,
    load_idx,
    synth_sphere,
    to_sphere_dataset,
    write_idx,
)
from .experiments import (
    EXPERIMENT_NAMES,
    ExperimentSpec,
    RunManifest,
    ks_normal_test,
    run_experiment,
)
from .gradients import GradReport, compare_grads, grad_adjoint, grad_discrete, grad_fd
from .kernels import (
    GramMatrix,
    KernelTables,
    empirical_nngp,
    empirical_ntk,
    gram,
    kernel_limit_extrapolate,
    min_eig,
    nngp_tables,
    ntk_d_naive,
    ntk_tables,
    s_star_checks,
    spd_witness,
)
from .model import (
    Grads,
    ModelConfig,
    Params,
    adjoint_terminal,
    init_params,
    initial_state,
    load_params,
    param_distance,
    readout,
    save_params,
    vector_field,
)
from .solvers import (
    SolverSpec,
    Trajectory,
    discretize_resnet_forward,
    solve_augmented,
    solve_backward_adjoint,
    solve_forward,
)
from .training import (
    TrainHistory,
    convergence_audit,
    distance_audit,
    gd_step,
    history_to_csv,
    lr_bound,
    train,
)

__version__ = "0.1.0"
