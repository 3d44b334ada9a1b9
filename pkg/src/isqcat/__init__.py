"""Transient and busy-period analysis of infinite-server queues with catastrophes."""

from .busy import (BusyPeriodReport, LSTValue, busy_moments, busy_report, invert_lst, lst_busy_batch,
                   lst_busy_cycle, lst_busy_multiclass, lst_busy_period, lt_idle, md_closed_forms)
from .config import ConfigError, RunManifest, dump_config, parse_config
from .model import BatchLaw, CustomerClass, MarkVector, ModelSpec, RateFunction, ServiceDistribution
from .quadrature import QuadratureResult, cumulative_table, integrate, laplace_integral
from .sim import SimConfig, SimulationSummary, empirical_lst, simulate_busy, simulate_transient
from .transient import (TransientQuery, TransientResult, factorization_check, idle_prob, kernel_phi,
                        moment, pgf_joint, served_pgf, solve, state_pmf, state_prob)

__all__ = [
    "BatchLaw", "BusyPeriodReport", "ConfigError", "CustomerClass", "LSTValue", "MarkVector",
    "ModelSpec", "QuadratureResult", "RateFunction", "RunManifest", "ServiceDistribution",
    "SimConfig", "SimulationSummary", "TransientQuery", "TransientResult", "busy_moments",
    "busy_report", "cumulative_table", "dump_config", "empirical_lst", "factorization_check",
    "idle_prob", "integrate", "invert_lst", "kernel_phi", "laplace_integral", "lst_busy_batch",
    "lst_busy_cycle", "lst_busy_multiclass", "lst_busy_period", "lt_idle", "md_closed_forms",
    "moment", "parse_config", "pgf_joint", "served_pgf", "simulate_busy", "simulate_transient",
    "solve", "state_pmf", "state_prob",
]
