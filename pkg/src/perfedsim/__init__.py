"""Exact risk analysis and simulation for personalized federated linear
regression in the overparameterized regime.

The package is organized as: model (populations and data), estimators
(closed-form global and personalized solutions), risk (exact conditional
risks and a Monte Carlo oracle), theory (asymptotic limits), fedtrain
(iterative counterparts), harness + cli (sweeps and comparison).
"""

from .errors import (DegenerateHomogeneity, Diverged, DomainError,
                     InternalInconsistency, InvalidSpec, IoError,
                     NoRoot, NonConvergence, NonFiniteInput, NonPositiveLambda,
                     NumericalInconsistency, ParseError, PerfedsimError,
                     SingularCoupling, SingularGlobalGram, SingularMetaGram,
                     ZeroVector)
from .model import (ClientData, ClientSpec, FederatedDataset, PopulationSpec,
                    SpectralDistribution, client_weights, esd,
                    expand_spectrum, generate_population, wesd)
from .numerics import RngStream, SpdFactor, substream
from .estimators import (GlobalModel, PersonalModel, fedavg_global,
                         ftfa_personalize, maml_global, maml_personalize,
                         naive_minnorm, naive_ridge, pfedme_solve,
                         rtfa_personalize)
from .risk import (RiskReport, exact_fedavg_risk, exact_ftfa_risk,
                   exact_maml_risk, exact_naive_risks, exact_pfedme_risk,
                   exact_rtfa_risk, mc_risk)
from .theory import (StieltjesSolution, TheoryLimit, fedavg_limit,
                     ftfa_beats_fedavg, ftfa_limit, mn1, mp_stieltjes,
                     mp_stieltjes_deriv, naive_limit, naive_ridge_limit,
                     naive_ridge_optimal, ridge_limits_general,
                     ridgeless_limits_general, rtfa_limit, rtfa_optimal,
                     solve_c0, solve_mn)
from .fedtrain import (TrainConfig, Trajectory, fedavg_train, ftfa_train,
                       local_gradient, local_train, maml_train, pfedme_train,
                       rtfa_train)
from .harness import (ResultRow, SweepConfig, compare, parse_config,
                      read_rows, run_sweep, run_trial, write_rows)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
