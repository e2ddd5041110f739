"""soc_kit: separation-based data-driven stochastic optimal control.

Pipeline: open-loop belief-space trajectory optimization against a
black-box simulator (EnKF belief propagation, finite-difference gradient
descent), time-varying ERA identification of the trajectory-linearized
system from impulse experiments, time-varying LQG synthesis on the
reduced-order model, and Monte Carlo closed-loop evaluation.
"""

from .enkf import Ensemble, GaussianBelief, enkf_propagate
from .exceptions import (ConfigError, ContractViolationError, DivergenceError,
                         SocKitError, StallError, SynthesisError,
                         UnderdeterminedError)
from .harness import (MonteCarloStats, RolloutRecord, monte_carlo,
                      nominal_reference_cost, realized_cost, run_closed_loop,
                      theorem1_check)
from .lqg import (LqgController, LqrWeights, kalman_predict_update,
                  output_weights, riccati_gains, synthesize_lqg)
from .plant import (HeatPlantConfig, HeatSlabPlant, LinearPlant, Plant,
                    PlantSpec)
from .trajopt import (CostSpec, GradientConfig, NominalTrajectory,
                      OpenLoopResult, fd_gradient, nominal_cost,
                      nominal_rollout, optimize_open_loop)
from .tvera import (ExperimentArchive, HankelConfig, LtvModel,
                    MarkovParameterSet, build_hankel, era_realize,
                    estimate_markov, reconstruct_markov,
                    run_impulse_experiments)

__version__ = "0.1.0"
