"""Mixed-precision PTQ emulation, plan search and degeneration scaling laws."""

from .errors import QuantLawError
from .formats import BlockFormat, fake_quant
from .laws import ExperimentPoint, FitResult, LawParams, eval_law, fit_law
from .model import CLM_MICRO, Checkpoint, ModelConfig, QuantPlan, SiteId, init_random
from .search import SearchSpec, TrialSet, estimate, run_search

__version__ = "0.1.0"

__all__ = [
    "BlockFormat", "CLM_MICRO", "Checkpoint", "ExperimentPoint", "FitResult", "LawParams",
    "ModelConfig", "QuantLawError", "QuantPlan", "SearchSpec", "SiteId", "TrialSet",
    "estimate", "eval_law", "fake_quant", "fit_law", "init_random", "run_search",
]
