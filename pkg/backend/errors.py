# backend/errors.py
"""
Exception taxonomy shared by the backend modules.

The runner maps each class to a process exit code:
  - ValidationError  -> 2 (bad scenario or bad arguments)
  - NumericalError   -> 3 (invariant violation, non-convergence, blow-up)
  - ResourceCapError -> 4 (dimension or memory cap)
"""


class FermiDynError(Exception):
    """Base class for all fermidyn errors."""

    exit_code = 1


class ValidationError(FermiDynError, ValueError):
    exit_code = 2


class NumericalError(FermiDynError, RuntimeError):
    exit_code = 3


class ResourceCapError(FermiDynError, RuntimeError):
    exit_code = 4
