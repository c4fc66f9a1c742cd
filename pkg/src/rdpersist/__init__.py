"""Persistence diagnostics for stochastic reaction-diffusion and delay equations."""

__version__ = "0.1.0"

from .domain import EllipticOp, SpectralDomain, apply_semigroup, build_domain, norms
from .engine import ModelSpec, StepperConfig, convergence_probe, simulate, step
from .eigen import principal_eig, rayleigh
from .lyapunov import LyapunovMonitor, OccupationMeasure, drift_check, observe, persistence_verdict
from .noise import NoiseSpec, NoiseStream, check_admissibility, sample_increment
from .projective import estimate_lambda, evaluate_H, linearize, polar, project_step_consistency

__all__ = [
    "EllipticOp",
    "LyapunovMonitor",
    "ModelSpec",
    "NoiseSpec",
    "NoiseStream",
    "OccupationMeasure",
    "SpectralDomain",
    "StepperConfig",
    "apply_semigroup",
    "build_domain",
    "check_admissibility",
    "convergence_probe",
    "drift_check",
    "estimate_lambda",
    "evaluate_H",
    "linearize",
    "norms",
    "observe",
    "persistence_verdict",
    "polar",
    "principal_eig",
    "project_step_consistency",
    "rayleigh",
    "sample_increment",
    "simulate",
    "step",
]
