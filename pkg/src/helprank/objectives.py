"""Training losses over one review list, plus ranking metrics.

The listwise loss is cross-entropy between the softmax of the predicted
scores and the softmax of the integer labels; the pairwise loss is a hinge
on one sampled preference pair with margin equal to the list's label range.
Both return the loss value together with its gradient in the raw scores, so
the caller can seed backpropagation directly.

Metrics rank by descending score with ties broken by original index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkernel import Rng


@dataclass
class ScoredList:
    """Predicted scores and integer labels for one product's reviews."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.scores.size != self.labels.size or self.scores.size < 1:
            raise ValueError(
                f"scores ({self.scores.size}) and labels ({self.labels.size}) "
                "must be equal-length and nonempty"
            )

    def __len__(self):
        return self.scores.size


@dataclass
class LossValue:
    value: float
    grad: np.ndarray  # d loss / d score, one entry per review


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def to_distributions(scored: ScoredList) -> tuple[np.ndarray, np.ndarray]:
    """Softmax the score list and the label list; both sum to 1."""
    return _softmax(scored.scores), _softmax(scored.labels.astype(np.float64))


def listwise_loss(scored: ScoredList) -> LossValue:
    """Cross-entropy (natural log) between label and score distributions.

    The gradient in the raw scores is ``softmax(scores) - softmax(labels)``,
    whose components sum to zero and are each at most 1 in magnitude.
    """
    f_dist, y_dist = to_distributions(scored)
    shifted = scored.scores - scored.scores.max()
    log_norm = math.log(np.exp(shifted).sum())
    value = float(np.dot(y_dist, log_norm - shifted))
    return LossValue(value=value, grad=f_dist - y_dist)


def pairwise_margin(labels) -> float:
    """Label range of the list, used as the hinge margin."""
    labels = np.asarray(labels)
    return float(labels.max() - labels.min())


def sample_preference_pair(labels, rng: Rng):
    """A uniformly random (higher, lower) label index pair, or None."""
    labels = np.asarray(labels)
    pairs = [
        (i, j)
        for i in range(labels.size)
        for j in range(labels.size)
        if labels[i] > labels[j]
    ]
    if not pairs:
        return None
    return pairs[rng.integers(0, len(pairs))]


def pairwise_loss(scored: ScoredList, rng: Rng):
    """Hinge loss on one sampled preference pair.

    Returns None when every label in the list is equal (no valid pair); the
    caller skips such products.  The subgradient is -1 on the preferred
    score and +1 on the other while the hinge is active, and 0 elsewhere,
    including exactly at the kink.
    """
    pair = sample_preference_pair(scored.labels, rng)
    if pair is None:
        return None
    pos, neg = pair
    margin = pairwise_margin(scored.labels)
    raw = -scored.scores[pos] + scored.scores[neg] + margin
    grad = np.zeros_like(scored.scores)
    if raw > 0:
        grad[pos] = -1.0
        grad[neg] = 1.0
        return LossValue(value=float(raw), grad=grad)
    return LossValue(value=0.0, grad=grad)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def rank_order(scores) -> np.ndarray:
    """Indices in descending score order, ties broken by original index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def average_precision(ranked_labels, tau: int = 1):
    """AP over binarised relevance (label >= tau); None if nothing relevant."""
    relevant = np.asarray(ranked_labels) >= tau
    if not relevant.any():
        return None
    hits = 0
    total = 0.0
    for position, rel in enumerate(relevant, start=1):
        if rel:
            hits += 1
            total += hits / position
    return total / hits


def mean_average_precision(scored_lists, tau: int = 1) -> float:
    """MAP over products; products with no relevant review are excluded."""
    values = []
    for scored in scored_lists:
        order = rank_order(scored.scores)
        ap = average_precision(scored.labels[order], tau)
        if ap is not None:
            values.append(ap)
    if not values:
        return 0.0
    return float(np.mean(values))


def _gain(label: float, gain: str) -> float:
    if gain == "exp":
        return 2.0 ** label - 1.0
    if gain == "linear":
        return float(label)
    raise ValueError(f"unknown NDCG gain {gain!r}")


def dcg_at(labels_in_order, n: int, gain: str = "exp") -> float:
    total = 0.0
    for position, label in enumerate(labels_in_order[:n], start=1):
        total += _gain(label, gain) / math.log2(position + 1)
    return total


def ndcg_at(ranked_labels, n: int, gain: str = "exp") -> float:
    """NDCG at cutoff ``n``; defined as 1.0 when the ideal DCG is zero."""
    if n < 1:
        raise ValueError(f"NDCG cutoff must be >= 1, got {n}")
    ranked_labels = list(ranked_labels)
    ideal = sorted(ranked_labels, reverse=True)
    idcg = dcg_at(ideal, n, gain)
    if idcg == 0.0:
        return 1.0
    return dcg_at(ranked_labels, n, gain) / idcg


def mean_ndcg_at(scored_lists, n: int, gain: str = "exp") -> float:
    values = []
    for scored in scored_lists:
        order = rank_order(scored.scores)
        values.append(ndcg_at(scored.labels[order].tolist(), n, gain))
    if not values:
        return 0.0
    return float(np.mean(values))


def score_separation(scores, labels, tau: int = 3):
    """AUC of helpful (label >= tau) versus unhelpful scores; ties count 1/2.

    Returns None when either class is empty.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    helpful = scores[labels >= tau]
    unhelpful = scores[labels < tau]
    if helpful.size == 0 or unhelpful.size == 0:
        return None
    wins = (helpful[:, None] > unhelpful[None, :]).sum()
    ties = (helpful[:, None] == unhelpful[None, :]).sum()
    return float((wins + 0.5 * ties) / (helpful.size * unhelpful.size))
