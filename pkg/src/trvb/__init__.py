"""Trimer resonating-valence-bond states: tensor networks, cylinders, CTMRG and exact diagonalization."""

__version__ = "0.1.0"

from .tensor_core import ChargedTensor, ChargeError, ConvergenceError, Leg, SectorSpectrum, leading_eigs  # noqa: F401
from .lattice import BudgetExceeded  # noqa: F401
from .cylinder import MemoryBudgetError  # noqa: F401
