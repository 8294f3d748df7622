"""Risk-averse policy evaluation with linear features.

Transition risk mappings, projected risk-averse dynamic programming, sampled
TD(0)/TD(lambda) learners and a small fleet-repositioning environment.
"""

from .errors import (
    ConfigError,
    ContractionError,
    EnumerationLimitError,
    ErgodicityError,
    SolverError,
)
from .fleet import DemandModel, FleetConfig, desk_instance, run_optimistic, solve_lookahead
from .markov import MarkovChain, load_chain, poisson_solution, random_ergodic_chain, stationary_distribution
from .projected import FeatureModel, load_features, solve_multistep, solve_single_step
from .risk import RiskMapping, distortion_coefficient, evaluate, exact_sample_mapping
from .td import LearnerConfig, LearnerState, StepsizeSchedule, run_learner, validate_schedule

__version__ = "0.1.0"
