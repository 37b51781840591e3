"""rulerob: dynamics-aware robustness of STL traffic rules.

Monitors signal-temporal-logic traffic rules over recorded driving
scenarios, computes a Monte-Carlo, prediction-based satisfaction degree
for rule predicates, learns a Gaussian-process surrogate of it for fast
online queries, and plugs the result into a sampling-based, rule-aware
trajectory planner.
"""

from rulerob._core import BACKEND, HAVE_COMPILED
from rulerob.errors import InputError, NumericalError, RulerobError

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "HAVE_COMPILED",
    "InputError",
    "NumericalError",
    "RulerobError",
    "__version__",
]
