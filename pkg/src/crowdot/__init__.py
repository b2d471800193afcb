"""Correntropy-based optimal-transport loss and a numpy toy crowd counter."""
from .correntropy import KernelConfig, correntropy_cost, empirical_correntropy, gaussian_kernel
from .grid import DensityGrid, PointAnnotations
from .ot import CostKind, SolverConfig, combined_loss, exact_ot, sinkhorn

__all__ = [
    "CostKind",
    "DensityGrid",
    "KernelConfig",
    "PointAnnotations",
    "SolverConfig",
    "combined_loss",
    "correntropy_cost",
    "empirical_correntropy",
    "exact_ot",
    "gaussian_kernel",
    "sinkhorn",
]
__version__ = "0.1.0"
