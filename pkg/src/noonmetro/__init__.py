"""Simulation, calibration and phase estimation for lossy two-photon NOON interferometry."""

__version__ = "0.1.0"

from .calibration import CalibrationCurves, CalibrationError, estimate_xi, fit_model
from .estimation import (
    FisherCurve,
    PhaseEstimateBatch,
    PhaseEstimator,
    ResourceAccount,
    aggregate_samples,
    bootstrap_sem,
    estimate_phase,
    fisher_curve,
    fisher_information,
    sample_estimates,
    snl_adjusted,
    snl_sem,
    total_resources,
)
from .model import (
    InterferometerModel,
    ModelDomainError,
    TransmissionProfile,
    eta_min,
    ideal_outcome_probs,
    lossy_event_probs,
    outcome_efficiencies,
    recorded_probs,
    resch_criterion,
    worst_case_eta_min,
)
from .simulator import (
    EventCounts,
    FringeScan,
    SimulationLimitError,
    SourceConfig,
    simulate_pulse,
    simulate_pulses,
    simulate_scan,
    simulate_trials,
)

__all__ = [
    "CalibrationCurves", "CalibrationError", "EventCounts", "FisherCurve", "FringeScan",
    "InterferometerModel", "ModelDomainError", "PhaseEstimateBatch", "PhaseEstimator",
    "ResourceAccount", "SimulationLimitError", "SourceConfig", "TransmissionProfile",
    "aggregate_samples", "bootstrap_sem", "estimate_phase", "estimate_xi", "eta_min",
    "fisher_curve", "fisher_information", "fit_model", "ideal_outcome_probs",
    "lossy_event_probs", "outcome_efficiencies", "recorded_probs", "resch_criterion",
    "sample_estimates", "simulate_pulse", "simulate_pulses", "simulate_scan",
    "simulate_trials", "snl_adjusted", "snl_sem", "total_resources", "worst_case_eta_min",
]
