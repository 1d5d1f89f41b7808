"""Nonconforming boundary elements on the unit-square screen.

Crouzeix-Raviart discretization of the hypersingular integral equation in
curl form, two-level (h-h/2) a posteriori error estimators, and an
adaptive newest-vertex-bisection refinement loop.
"""

from .mesh import (
    Mesh,
    RefinementMap,
    MeshFormatError,
    build_initial_square_mesh,
    mesh_width,
    refine_nvb,
    uniform_refine,
    graded_square_mesh,
    node_patch,
    edge_patch,
    element_patch,
    mesh_io_write,
    mesh_io_read,
)
from .spaces import (
    DofSpace,
    CoefVec,
    PwConstVecField,
    EdgeJumpField,
    cr_space,
    conforming_space,
    basis_gradient,
    curl_field,
    embed_coarse_in_fine,
    jump_field,
    clement_interpolate,
    project_pwconst,
    prolong_conforming,
    conforming_to_cr,
)
from .assembly import (
    EnergyForm,
    QuadratureRule,
    quadrature_rule,
    panel_integral,
    assemble_energy_form,
    energy_inner,
    assemble_stiffness,
    assemble_rhs_constant,
    assemble_rhs_power,
    assemble_rhs_manufactured,
)
from .estimators import (
    NumericalError,
    SolvePair,
    EstimatorReport,
    solve_spd,
    solve_pair,
    conforming_component,
    estimator_eta,
    estimator_eta_tilde,
    estimator_mu,
    estimator_mu_tilde,
    jump_term,
    local_indicators,
    conf_gap,
    estimator_report,
)
from .adaptive import (
    ExperimentConfig,
    LevelRecord,
    ConvergenceHistory,
    doerfler_mark,
    adaptive_loop,
    run_experiment,
    fit_rate,
    emit_csv,
    emit_svg_plot,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
