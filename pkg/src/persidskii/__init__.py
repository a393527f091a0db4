"""Delay-robust analysis, estimation, identification, and control for
generalized Persidskii systems."""

__version__ = "0.1.0"

from .certify import (
    CertifyOutcome,
    FeasibilityRegion,
    IssCertificate,
    TauMaxResult,
    assemble_psi,
    assemble_psi_delay_free,
    certify_iss,
    evaluate_lkf,
    region_sweep,
    tau_max_bisection,
)
from .lmi import (
    AffineLmi,
    FeasibilityResult,
    FeasibilityStatus,
    min_eigenvalue,
    solve_feasibility,
    symmetrize,
)
from .model import (
    HistoryBuffer,
    PersidskiiSystem,
    SectorNonlinearity,
    Trajectory,
    rhs,
    simulate,
    verify_sector,
)

__all__ = [
    "AffineLmi",
    "CertifyOutcome",
    "FeasibilityRegion",
    "FeasibilityResult",
    "FeasibilityStatus",
    "HistoryBuffer",
    "IssCertificate",
    "PersidskiiSystem",
    "SectorNonlinearity",
    "TauMaxResult",
    "Trajectory",
    "assemble_psi",
    "assemble_psi_delay_free",
    "certify_iss",
    "evaluate_lkf",
    "min_eigenvalue",
    "region_sweep",
    "rhs",
    "simulate",
    "solve_feasibility",
    "symmetrize",
    "tau_max_bisection",
    "verify_sector",
]
