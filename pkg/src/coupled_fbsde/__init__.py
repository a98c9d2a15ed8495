"""Controlled coupled forward-backward SDEs: mollification, HJB solving, simulation and relaxed controls."""

from .hjb import (CFLError, EllipticityError, GridSpec, OutOfBoxError, SolverError, ValueField,
                  hamiltonian, min_hamiltonian, solve_hjb)
from .lab import (ConvergenceTable, ExperimentConfig, run_coupling_study, run_optimality_study,
                  run_value_convergence)
from .model import (ControlSet, ProblemSpec, ValidationReport, get_preset, preset_names, register_preset,
                    validate_all, validate_bounds, validate_ellipticity, validate_lipschitz)
from .mollify import BumpKernel, SmoothedCoefficients, make_kernel, smooth_coefficients, smooth_scalar
from .policy import AdmissibleControl, FeedbackPolicy, control_at, extract_policy
from .relaxed import (ChatteringResult, DiscreteMeasure, RelaxedControlMeasure, audit_convexity,
                      chattering_reduce, embed_strict)
from .simulate import (CostEstimate, PathBundle, SimConfig, bsde_residual, estimate_cost,
                       simulate_forward, simulate_relaxed, solve_backward_regression, solve_coupled_picard)

__version__ = "0.1.0"
