"""Numerical lab: KAM steps and leading Birkhoff normal forms, lattice
quantization, eigenvalue tracking and quasi-eigenvalue window experiments."""
from .errors import (AccuracyError, CertificationFailure, DegeneracyError, DiagnosticUnavailable, DomainError,
                     KamqeError, NoSolutionError, PreconditionError, SamplingError, SmallDivisorError, StepFailure)
from .model import Annulus, Box, EnergyBand, FourierHamiltonian, load_model, pendulum, ref2

__version__ = "0.1.0"

__all__ = [
    "AccuracyError", "Annulus", "Box", "CertificationFailure", "DegeneracyError", "DiagnosticUnavailable",
    "DomainError", "EnergyBand", "FourierHamiltonian", "KamqeError", "NoSolutionError", "PreconditionError",
    "SamplingError", "SmallDivisorError", "StepFailure", "load_model", "pendulum", "ref2",
]
