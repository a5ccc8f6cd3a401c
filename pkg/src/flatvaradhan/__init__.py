"""Varadhan functions, means and their asymptotics on flat tori."""

__version__ = "0.1.0"

from .distributions import Mixture, Tabulated, Uniform, VonMises, sample  # noqa: E402
from .heat_kernel import KernelConfig, cost, kernel  # noqa: E402
from .manifold import FlatTorus  # noqa: E402
from .varadhan import VaradhanFunction, mean, minimize, variance  # noqa: E402

__all__ = [
    "FlatTorus",
    "KernelConfig",
    "Mixture",
    "Tabulated",
    "Uniform",
    "VaradhanFunction",
    "VonMises",
    "cost",
    "kernel",
    "mean",
    "minimize",
    "sample",
    "variance",
]
