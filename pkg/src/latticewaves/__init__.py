"""Travelling waves of lattice differential equations.

Profiles, Floquet stability of the period map, and numerical experiments on
two counter-propagating waves separating from each other.
"""

__version__ = "0.1.0"

from .lattice import (HeavisideCutoff, LatticeState, WeightedNorm, apply_cutoff, constant_state, delta_state,
                      evaluate_site, read_state, shift, sup_norm, weighted_norm, write_state)
from .model import (BlowUpError, ModelError, ModelSpec, apply_linear, apply_nonlinearity, crossterm, rhs_embedded,
                    rhs_full)
from .zoo import (builtin_models, build_family, convolution, decoupled_copies, fhn, load_model, model_from_dict,
                  model_to_dict, nagumo, tristable)
from .stepper import IntegratorConfig, Trajectory, integrate, integrate_embedded, integrate_variational
from .waves import (PhaseCondition, PinnedFront, SolverError, WaveProfile, certify_decay, continue_branch,
                    front_seed, measure_speed, pulse_seed, read_profile, reflect, solve_profile, write_profile)
from .floquet import FloquetReport, Tolerances, analyse, build_monodromy, conjugate_weight, spectrum, verdict_h2
from .exitlab import (ExitConfig, ExitRunReport, build_initial, fit_shifts, manifold_distance, measure_crossterm,
                      run_direct, run_embedded, run_exit, stacking_run, sweep)
