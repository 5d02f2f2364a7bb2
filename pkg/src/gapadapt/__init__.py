"""Source-free domain adaptation with a prompt-customized vision-language teacher."""

from .core_math import entropy, kl_divergence, mmd_distance, mutual_information
from .engine import AdaptationConfig, Adapter, TargetData, adapt
from .evaluation import EvalReport, evaluate, evaluate_predictions, mmd_trajectory
from .models import ClipTeacher, MockTeacher, PromptContext, TargetModel, pretrain_source

__version__ = "0.1.0"

__all__ = [
    "AdaptationConfig",
    "Adapter",
    "ClipTeacher",
    "EvalReport",
    "MockTeacher",
    "PromptContext",
    "TargetData",
    "TargetModel",
    "adapt",
    "entropy",
    "evaluate",
    "evaluate_predictions",
    "kl_divergence",
    "mmd_distance",
    "mmd_trajectory",
    "mutual_information",
    "pretrain_source",
]
