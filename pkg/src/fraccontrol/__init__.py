"""Exterior approximate control of fractional heat and wave equations.

Modules
-------
lattice
    Grids, region masks, cutoffs, space-time fields and their norms.
fracops
    Dense restricted fractional Laplacian, its Dirichlet spectrum and oracles.
evolution
    Forward/adjoint time stepping with exterior data, Galerkin backend.
extension
    Weighted harmonic extension, Neumann trace and smallness diagnostics.
control
    Dual functional minimization, control synthesis, sweeps and the Gramian.
cli
    Config-driven experiment runner.
"""

__version__ = "0.1.0"

from .lattice import (  # noqa: F401
    Cutoff,
    Grid,
    RegionPartition,
    SpaceTimeField,
    TimeGrid,
    build_grid,
    make_cutoff,
    norm_h1,
    norm_h2,
    norm_l2,
    partition,
)
from .fracops import FracOperator, apply, assemble, dirichlet_spectrum, fft_reference_apply  # noqa: F401
from .evolution import (  # noqa: F401
    HeatProblem,
    WaveProblem,
    duality_residual,
    energy_report,
    solve_heat,
    solve_heat_galerkin,
    solve_wave,
)
from .control import (  # noqa: F401
    ControlConfig,
    ControlResult,
    OptimizerSettings,
    apply_K,
    apply_K_star,
    auxiliary_functional_gap,
    cost_sweep,
    evaluate_functional,
    gramian_svd,
    make_target,
    minimize,
    verify_approximation,
)
from .extension import (  # noqa: F401
    calibrate_cs,
    make_strip,
    neumann_trace,
    smallness_report,
    solve_extension,
)
