"""Label-noise-robust abnormality classification and worklist triage simulation."""

from . import cohort_gen, noise_correction, roc_stats, triage_sim
from .errors import DataError, TrainingError, TriageError, ValidationError

__all__ = [
    "cohort_gen",
    "noise_correction",
    "roc_stats",
    "triage_sim",
    "DataError",
    "TrainingError",
    "TriageError",
    "ValidationError",
]
__version__ = "0.1.0"
