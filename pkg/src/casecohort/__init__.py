"""Cox-model inference from stratified, weight-calibrated case-cohort samples.

Point estimation of log relative hazards, cumulative baseline hazard and
covariate-specific pure risk from two- and three-phase case-cohort data,
with influence-function variance estimation that decomposes the
superpopulation and sampling phases, raking weight calibration, and a
Monte-Carlo harness for coverage studies.
"""

from .calibration import (AuxiliaryMatrix, CalibrationResult, ImputationModel,
                          ImputationSpec, build_auxiliaries, fit_wls,
                          fit_wmultinomial, rake)
from .coxfit import (BaselineHazard, FitResult, PureRisk, SMoments,
                     SolverControls, WeightedSample, breslow, fit_cox,
                     pure_risk, s_moments)
from .dataset import (CohortDataset, CohortRecord, CohortSchema, at_risk,
                      load_cohort, write_cohort)
from .design import (JointInclusion, PhaseThreeDesign, PhaseTwoDesign,
                     estimate_phase3_weights, joint_inclusion,
                     known_phase3_design)
from .influence import (InfluenceSet, Regime, ThreePhaseExtras, dump_influences,
                        influence_beta, influence_eta, influence_gamma,
                        influence_hazard, influence_pure_risk)
from .simharness import (ALL_REGIMES, ScenarioConfig, ScenarioSummary,
                         run_scenario, sample_phase2, sample_phase3,
                         simulate_cohort)
from .variance import (ConfidenceInterval, VarianceReport, confidence_interval,
                       normal_quantile, variance_calibrated, variance_design,
                       variance_three_phase)

__version__ = "0.1.0"

__all__ = [
    "AuxiliaryMatrix", "BaselineHazard", "CalibrationResult", "CohortDataset",
    "CohortRecord", "CohortSchema", "ConfidenceInterval", "FitResult",
    "ImputationModel", "ImputationSpec", "InfluenceSet", "JointInclusion",
    "PhaseThreeDesign", "PhaseTwoDesign", "PureRisk", "Regime",
    "ScenarioConfig", "ScenarioSummary", "SMoments", "SolverControls",
    "ThreePhaseExtras", "VarianceReport", "WeightedSample", "ALL_REGIMES",
    "at_risk", "breslow", "build_auxiliaries", "confidence_interval",
    "dump_influences", "estimate_phase3_weights", "fit_cox", "fit_wls",
    "fit_wmultinomial", "influence_beta", "influence_eta", "influence_gamma",
    "influence_hazard", "influence_pure_risk", "joint_inclusion",
    "known_phase3_design", "load_cohort", "normal_quantile", "pure_risk",
    "rake", "run_scenario", "s_moments", "sample_phase2", "sample_phase3",
    "simulate_cohort", "variance_calibrated", "variance_design",
    "variance_three_phase", "write_cohort",
]
