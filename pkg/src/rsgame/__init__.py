"""Constrained two-player games on regime-switching jump-diffusions."""

from .errors import ModelValidationError, RSGameError

__all__ = ["ModelValidationError", "RSGameError"]
