"""Component-based reduced-order models on partition-of-unity spaces.

Submodules: ``fem`` (spectral elements, Newton), ``models`` (PDEs),
``components`` (archetypes, PoU), ``training`` (randomized localized
training, POD), ``rom`` (global Galerkin ROM), ``error`` (local residuals,
bounds), ``enrichment`` (residual-driven basis enrichment), ``studies``,
``verify`` and ``cli``.
"""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
