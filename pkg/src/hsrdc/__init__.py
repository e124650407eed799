"""Hybrid structurally regularized deep clustering for unsupervised domain adaptation."""

__version__ = "0.1.0"

from .errors import ContractError, NumericalDomainError, NumericalFailure  # noqa: E402

__all__ = ["ContractError", "NumericalDomainError", "NumericalFailure", "__version__"]
