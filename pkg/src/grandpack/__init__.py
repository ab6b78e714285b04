"""Toolkit for heterogeneous service systems with general packing constraints.

Event-driven simulation under greedy-random placement policies, fluid-limit
dynamics with entropy descent diagnostics, product-form equilibria via dual
Newton, and the weighted-server-count LP with its optimality conditions.
"""

from .model import (Configuration, ConfigurationSet, ModelError, PackingModel,
                    build_edges, generate_vector_packing, load_model,
                    validate_monotone)
from .optimize import (LpSolution, ProductFormSolution, alpha_sweep,
                       check_feasibility, projected_gradient_reference,
                       solve_lp, solve_product_form_finite,
                       solve_product_form_infinite)
from .fluid import (MODE_FINITE, MODE_INFINITE, Trajectory, drift_xi,
                    fluid_rhs_finite, fluid_rhs_infinite, integrate,
                    lyapunov_finite, lyapunov_infinite)
from .simulator import (GRAND_AZ, GRAND_F, GRAND_ZP, POLICIES, RunStatistics,
                        Simulator, run_simulation)
from .studies import (ExperimentPlan, run_conjecture1_study,
                      run_conjecture2_study, run_theorem1_study)
from .acceptance import run_acceptance

__version__ = "0.1.0"
