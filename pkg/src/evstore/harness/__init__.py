"""Synthetic data, stress and fault experiments, and plot-ready reports."""

from .config import load_config
from .faults import FaultEvent, FaultPlan, ScenarioReport, run_client_kill_scenario, run_fault_scenario
from .generator import Generator, GeneratorProfile, Manifest, generate
from .report import emit_report
from .stress import StressResult, stress_cell, stress_scan

__all__ = ["load_config", "FaultEvent", "FaultPlan", "ScenarioReport", "run_client_kill_scenario",
           "run_fault_scenario", "Generator", "GeneratorProfile", "Manifest", "generate",
           "emit_report", "StressResult", "stress_cell", "stress_scan"]
