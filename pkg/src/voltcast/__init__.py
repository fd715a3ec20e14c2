"""Voltage estimation on radial distribution feeders from a few voltage
sensors and probabilistic load forecasts."""
from .estimator import (
    UnobservableError,
    VoltageForecast,
    armse,
    estimate,
    forecast_voltage_stats,
    llse_update,
    recover_voltages,
    wls_estimate,
    wls_pseudo_estimate,
)
from .forecast import KernelConfig, FeatureConfig, LoadStatistics, assemble_load_statistics, fit_gp
from .linear_pf import EstimatorModel, NumericalError, assemble, load_model, save_model
from .network import Feeder, FeederError, SensorSet, ieee37, load_feeder, parse_feeder
from .oracle import sweep_solve
from .placement import PlacementProblem, greedy_place, observable_split, placement_objective

__version__ = "0.1.0"

__all__ = [
    "EstimatorModel", "FeatureConfig", "Feeder", "FeederError", "KernelConfig",
    "LoadStatistics", "NumericalError", "PlacementProblem", "SensorSet",
    "UnobservableError", "VoltageForecast", "armse", "assemble",
    "assemble_load_statistics", "estimate", "fit_gp", "forecast_voltage_stats",
    "greedy_place", "ieee37", "llse_update", "load_feeder", "load_model",
    "observable_split", "parse_feeder", "placement_objective", "recover_voltages",
    "save_model", "sweep_solve", "wls_estimate", "wls_pseudo_estimate",
]
