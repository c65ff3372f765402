"""Anchored variational EM for sequential latent-state models with random effects."""

from .base import AvemConfig, DegeneracyWarning, FitReport, NumericalError, QFactor
from .emissions import BernoulliEmission, EmissionModel, GaussianEmission
from .exact_em import fit_mcem, fit_qem
from .hmm import ChainParams, StatePosterior
from .kalman import LgssmSpec
from .messm import MessmParams, SubjectEffects, default_init_messm, fit_messm, fit_reduced_messm
from .mhmm import MhmmParams, anchored_elbo, default_init_mhmm, fit_mhmm
from .partial import PavemParams, default_init_pavem, fit_pavem

__all__ = [
    "AvemConfig",
    "BernoulliEmission",
    "ChainParams",
    "DegeneracyWarning",
    "EmissionModel",
    "FitReport",
    "GaussianEmission",
    "LgssmSpec",
    "MessmParams",
    "MhmmParams",
    "NumericalError",
    "PavemParams",
    "QFactor",
    "StatePosterior",
    "SubjectEffects",
    "anchored_elbo",
    "default_init_messm",
    "default_init_mhmm",
    "default_init_pavem",
    "fit_mcem",
    "fit_messm",
    "fit_mhmm",
    "fit_pavem",
    "fit_qem",
]

__version__ = "0.1.0"
