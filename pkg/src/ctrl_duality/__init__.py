"""Complementary Monte-Carlo bounds for stochastic control problems.

Lower bounds come from simulating a sub-optimal feedback control
extracted from a regression-based backward scheme; upper bounds come
from a dual representation that swaps expectation and supremum and
penalizes with a martingale built from the same regressions.  Worked
applications: option pricing under uncertain volatility and unilateral
counterparty valuation adjustment.
"""

from .bsde import BsdeSolution, UvmSpec, backward_sweep, hamiltonian, hamiltonian_batch
from .cva import CvaSpec, HjForcing, cva_dual, cva_exact_phizero, solve_hj, solve_hj_batch, zakai_forcing
from .discretize import (
    ControlBox,
    ControlNet,
    TimeGrid,
    enumerate_control_paths,
    make_control_net,
    make_time_grid,
)
from .dual import (
    Estimate,
    PathObjective,
    american_dual,
    dual_upper_bound,
    lower_bound,
    maximize_path,
    pathwise_objective,
    simulate_feedback,
)
from .errors import ConfigError, CtrlDualityError, NumericalError
from .nelder_mead import nelder_mead_batch
from .paths import (
    ModelSpec,
    NoiseBatch,
    Payoff,
    discount_factors,
    dump_paths_csv,
    evolve_controlled,
    evolve_controlled_batch,
    evolve_reference,
    sample_noise,
    step_state,
)
from .pde import Grid1D, default_bsb_grid, default_cva_grid, solve_bsb_1d, solve_cva_pde
from .regress import BasisSpec, RegressedFn, eval_basis, fit, fit_many, from_text, to_text

__version__ = "0.1.0"
