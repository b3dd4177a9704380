"""Finite-population mean field games.

Implicit one-period population systems and their controlled-diffusion
counterparts: equilibrium solvers, deviation-gain audits with common
random numbers, Wasserstein tooling for empirical measures, exact
enumeration oracles for small discrete instances, and a config-driven
experiment harness.
"""

__version__ = "0.1.0"

from .measures import (EmpiricalMeasure, MeasureBatch, empirical_from_samples,
                       load_measure, marginal, moment, save_measure,
                       wasserstein)
from .models import (AssumptionCertificate, ContinuousModel, StaticModel,
                     builtin_discrete_flip, builtin_lq_continuous,
                     builtin_lq_static, check_assumptions, model_from_dict,
                     table_model_from_dict)
from .oracle import (DiscreteInstance, OracleDeviation, OracleMfePoint,
                     exact_conditional_law, exact_deviation_gain, exact_mfe,
                     exact_payoff, exact_population_law, flip_instance)
from .rng import SEED_MAX, substream
from .static_game import (DeviationReport, MfeSolution, PinAudit,
                          PopulationState, Strategy,
                          apply_equilibrium_map_once, audit_grid,
                          estimate_conditional_law, estimate_deviation_gain,
                          induce_profile, max_deviation, payoff,
                          report_from_audits, solve_mfe,
                          solve_population_state)
from .continuous_game import (FeedbackControl, MeasureFlow, MfgFlowSolution,
                              OpenLoopRun, TimeGrid, ct_deviation_report,
                              flow_from_paths, policy_candidates, save_flow,
                              simulate_mean_field_sde,
                              simulate_n_player_openloop, solve_mfg_flow)
from .config import ConfigError, ExperimentConfig, load_config

__all__ = [
    "AssumptionCertificate", "ConfigError", "ContinuousModel",
    "DeviationReport", "DiscreteInstance", "EmpiricalMeasure",
    "ExperimentConfig", "FeedbackControl", "MeasureBatch", "MeasureFlow",
    "MfeSolution", "MfgFlowSolution", "OpenLoopRun", "OracleDeviation",
    "OracleMfePoint", "PinAudit", "PopulationState", "SEED_MAX",
    "StaticModel", "Strategy", "TimeGrid", "apply_equilibrium_map_once",
    "audit_grid", "builtin_discrete_flip", "builtin_lq_continuous",
    "builtin_lq_static", "check_assumptions", "ct_deviation_report",
    "empirical_from_samples", "estimate_conditional_law",
    "estimate_deviation_gain", "exact_conditional_law",
    "exact_deviation_gain", "exact_mfe", "exact_payoff",
    "exact_population_law", "flip_instance", "flow_from_paths",
    "induce_profile", "load_config", "load_measure", "marginal",
    "max_deviation", "model_from_dict", "moment", "payoff",
    "policy_candidates", "report_from_audits", "save_flow", "save_measure",
    "simulate_mean_field_sde", "simulate_n_player_openloop", "solve_mfe",
    "solve_mfg_flow", "solve_population_state", "substream",
    "table_model_from_dict", "wasserstein"]
