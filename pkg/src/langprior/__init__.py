"""Loss re-scaling and answer masking against class-imbalance language priors.

Numpy-only building blocks: answer statistics, per-(type, answer) loss
weights, losses with closed-form gradients, the answer-mask module, a small
hand-differentiated classifier, and the loss-confusion / gradient-norm
diagnostics.
"""

from langprior.vocab import (
    AnswerVocabulary,
    SoftLabel,
    TypeCountTable,
    build_vocab,
    count_answers,
    soft_label_from_counts,
)
from langprior.rescale import (
    WeightTable,
    build_weight_table,
    compute_raw_weight,
    smooth_weight,
)
from langprior.losses import LossGrad, combine_total, focal, sigm_bce, soft_ce

__all__ = [
    "AnswerVocabulary",
    "LossGrad",
    "SoftLabel",
    "TypeCountTable",
    "WeightTable",
    "build_vocab",
    "build_weight_table",
    "combine_total",
    "compute_raw_weight",
    "count_answers",
    "focal",
    "sigm_bce",
    "smooth_weight",
    "soft_ce",
    "soft_label_from_counts",
]

__version__ = "0.1.0"
