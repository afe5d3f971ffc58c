"""Review-helpfulness ranking at desk scale.

A coherence-reasoning encoder fuses product/review text and image features,
an attention stage contextualises each review against its list, and a soft
decision tree regresses helpfulness scores trained with a listwise
objective.  The ``theoria`` module numerically certifies the convexity,
gradient-bound and loss-bound properties that motivate the listwise choice.
"""

from .datagen import Dataset, GenConfig, ProductRecord, ReviewRecord, votes_to_label
from .numkernel import Parameter, Rng, Tensor
from .objectives import ScoredList, listwise_loss, pairwise_loss
from .regressor import Fcnn, SoftTree, tree_shape
from .trainer import HelpfulnessModel, TrainConfig, train

__all__ = [
    "Dataset",
    "Fcnn",
    "GenConfig",
    "HelpfulnessModel",
    "Parameter",
    "ProductRecord",
    "ReviewRecord",
    "Rng",
    "ScoredList",
    "SoftTree",
    "Tensor",
    "TrainConfig",
    "listwise_loss",
    "pairwise_loss",
    "train",
    "tree_shape",
    "votes_to_label",
]
