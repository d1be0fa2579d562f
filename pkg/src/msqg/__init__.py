"""Regularized stochastic modified SQG on the periodic square: lattice tools, Kraichnan
transport noise, Riesz kernels, an ensemble solver, spectral certificates and
paired-run uniqueness experiments."""

__version__ = "0.1.0"

from .errors import (ConfigurationError, DataError, DomainError, MSQGError, NumericError,
                     ParameterRangeWarning, StepRejected)
from .lattice import Lattice, SpectralScalarField, SpectralVectorField, read_msqg, write_msqg
from .covariance import CovarianceModel, c_delta_continuum, structure_functions
from .kernels import KernelSet, build_kernels
from .solver import EnergyLedger, RunResult, SolverConfig, ensemble, run
from .certificates import CertificateReport, TraceDecomposition, decompose_trace_symbol
from .uniqueness import PairedRun, gronwall_fit, i_terms_probe, paired_run
