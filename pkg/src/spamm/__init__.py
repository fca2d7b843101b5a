"""Sparse mixture models on the high-dimensional torus.

Learns mixtures whose components are low-dimensional circular densities
(wrapped Gaussian, diagonal wrapped Gaussian, or products of von Mises
factors) times the uniform density on the remaining coordinates, from
weighted samples.  Fitting combines EM steps with an l0 + simplex proximal
step on the weights; couplings are discovered by weighted KS and
correlation tests.
"""

__version__ = "0.1.0"

from .model import (
    DiagWrappedComponent,
    SparseMixture,
    VonMisesComponent,
    WeightedSampleBatch,
    WrappedComponent,
    marginalize,
    mixture_pdf,
    neg_log_likelihood,
    sample,
)
from .torus import TruncationLevel

__all__ = [
    "DiagWrappedComponent",
    "SparseMixture",
    "TruncationLevel",
    "VonMisesComponent",
    "WeightedSampleBatch",
    "WrappedComponent",
    "marginalize",
    "mixture_pdf",
    "neg_log_likelihood",
    "sample",
]
