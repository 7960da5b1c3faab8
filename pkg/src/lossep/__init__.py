"""Loss-calibrated expectation propagation.

Gaussian EP with an extra utility site that tilts the approximation toward
high-utility decisions, applied to the clutter/reactor problem and to
Gaussian process probit classification.
"""

from lossep.gauss import (
    GaussianMeanParams,
    GaussianMoment,
    GaussianNatural,
    ImproperDensity,
    NonPosteriorizableMoments,
)
from lossep.ep import EPConfig, EPState, Site, run_ep, run_loss_ep

__version__ = "0.1.0"

__all__ = [
    "GaussianMeanParams",
    "GaussianMoment",
    "GaussianNatural",
    "ImproperDensity",
    "NonPosteriorizableMoments",
    "EPConfig",
    "EPState",
    "Site",
    "run_ep",
    "run_loss_ep",
]
