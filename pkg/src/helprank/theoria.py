"""Numerical certification of the loss-theory claims.

Four families of checks back the training objective's generalization story:
convexity of both losses (Jensen sampling), boundedness of their gradients
(the listwise gradient components never exceed 1 in magnitude while the
pairwise subgradient components are exactly +-1 when active), closed-form
upper bounds on both loss values, and the two-term generalization bound
whose value shrinks with the Lipschitz constant and the loss ceiling.
A routing analysis summarises how a trained tree distributes leaf-reach
probability per label class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datagen import Dataset, N_LABELS
from .numkernel import Rng
from .objectives import ScoredList, listwise_loss, pairwise_loss, pairwise_margin

JENSEN_TOL = 1e-9
DEFAULT_THETAS = tuple(0.1 * k for k in range(1, 10))


@dataclass
class PropertyReport:
    name: str
    trials: int
    violations: int
    worst_margin: float
    passed: bool

    def csv_row(self) -> str:
        return (
            f"{self.name},{self.trials},{self.violations},"
            f"{self.worst_margin:.10g},{str(self.passed).lower()}"
        )


def reports_to_csv(reports: list[PropertyReport]) -> str:
    lines = ["property,trials,violations,worst_margin,pass"]
    lines.extend(r.csv_row() for r in reports)
    return "\n".join(lines) + "\n"


@dataclass
class BoundInputs:
    """Ingredients of the generalization bound.

    ``gamma`` is the loss's Lipschitz constant, ``loss_bound`` its value
    ceiling, ``iterations``/``rates`` the optimiser's step count and step
    sizes, ``n_samples`` the training-set size and ``delta`` the failure
    probability (in (0, 2]).
    """

    gamma: float
    loss_bound: float
    iterations: int
    rates: object          # scalar or per-step sequence of length `iterations`
    n_samples: int
    delta: float

    def rate_sum(self) -> float:
        if np.isscalar(self.rates):
            return float(self.rates) * self.iterations
        rates = np.asarray(self.rates, dtype=np.float64)
        if rates.shape != (self.iterations,):
            raise ValueError(
                f"rates has length {rates.size}, expected {self.iterations}"
            )
        return float(rates.sum())

    def validate(self) -> None:
        if not 0 < self.delta <= 2:
            raise ValueError(f"delta must be in (0, 2], got {self.delta}")
        if self.gamma < 0 or self.loss_bound < 0:
            raise ValueError("gamma and loss_bound must be nonnegative")
        if self.n_samples < 1 or self.iterations < 1:
            raise ValueError("n_samples and iterations must be >= 1")


def theorem1_bound(inputs: BoundInputs) -> float:
    """Two-term generalization ceiling; nondecreasing in gamma and in L."""
    inputs.validate()
    log_term = math.log(2.0 / inputs.delta)
    first = inputs.loss_bound * math.sqrt(log_term / (2.0 * inputs.n_samples))
    per_step = (
        2.0 * math.sqrt(log_term / inputs.iterations)
        + math.sqrt(2.0 * log_term / inputs.n_samples)
        + 1.0 / inputs.n_samples
    )
    return first + 2.0 * inputs.gamma ** 2 * inputs.rate_sum() * per_step


# ---------------------------------------------------------------------------
# Jensen convexity harness
# ---------------------------------------------------------------------------

def jensen_violations(
    fn, sampler, trials: int, rng: Rng,
    tol: float = JENSEN_TOL, thetas=DEFAULT_THETAS,
) -> tuple[int, float]:
    """Count convexity violations of ``fn`` over sampled point pairs.

    ``sampler(rng)`` yields one point (a float vector); ``fn`` maps it to a
    scalar.  Returns (violations, worst margin), where a positive margin is
    the amount by which the chord inequality failed.
    """
    violations = 0
    worst = -math.inf
    for _ in range(trials):
        u = np.asarray(sampler(rng), dtype=np.float64)
        v = np.asarray(sampler(rng), dtype=np.float64)
        fu, fv = fn(u), fn(v)
        bad = False
        for theta in thetas:
            lhs = fn(theta * u + (1.0 - theta) * v)
            margin = lhs - (theta * fu + (1.0 - theta) * fv)
            worst = max(worst, margin)
            if margin > tol:
                bad = True
        if bad:
            violations += 1
    return violations, worst


def _random_label_softmax(rng: Rng, size: int) -> np.ndarray:
    labels = np.array([rng.integers(0, N_LABELS) for _ in range(size)], dtype=float)
    e = np.exp(labels - labels.max())
    return e / e.sum()


def _simplex_interior(rng: Rng, size: int) -> np.ndarray:
    g = rng.uniform(0.05, 1.0, size=size)
    return g / g.sum()


def check_convexity(loss_kind: str, trials: int, rng: Rng) -> PropertyReport:
    """Jensen test for the chosen loss.

    The listwise loss is tested in its probability-vector argument (where
    its convexity is claimed); the pairwise hinge in its two raw scores.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if loss_kind == "listwise":
        size = rng.integers(2, 9)
        y_dist = _random_label_softmax(rng, size)

        def fn(p):
            return float(-(y_dist * np.log(p)).sum())

        def sampler(r):
            return _simplex_interior(r, size)

    elif loss_kind == "pairwise":
        labels = np.array([rng.integers(0, N_LABELS) for _ in range(6)])
        alpha = pairwise_margin(labels)

        def fn(pair):
            return max(0.0, -pair[0] + pair[1] + alpha)

        def sampler(r):
            return r.uniform(-5.0, 5.0, size=2)

    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")

    violations, worst = jensen_violations(fn, sampler, trials, rng)
    return PropertyReport(
        name=f"convexity_{loss_kind}",
        trials=trials,
        violations=violations,
        worst_margin=worst,
        passed=violations == 0,
    )


# ---------------------------------------------------------------------------
# gradient bounds and empirical Lipschitz constants
# ---------------------------------------------------------------------------

def _random_scored_list(rng: Rng, max_len: int = 12,
                        score_range: float = 10.0) -> ScoredList:
    size = rng.integers(2, max_len + 1)
    scores = rng.uniform(-score_range, score_range, size=size)
    labels = np.array([rng.integers(0, N_LABELS) for _ in range(size)])
    return ScoredList(scores=scores, labels=labels)


def check_gradient_bounds(trials: int, rng: Rng) -> PropertyReport:
    """Certify the gradient-magnitude ordering between the two losses.

    Checks, per sampled list: (a) each per-term derivative magnitude
    y'_j * (1 - f'_j) is at most y'_j <= 1; (b) each full listwise gradient
    component |f'_j - y'_j| is at most 1; (c) every active pairwise
    subgradient component is exactly +-1.  The empirical supremum of (b)
    stays below the pairwise supremum of 1.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    violations = 0
    worst = -math.inf
    sup_listwise = 0.0
    for _ in range(trials):
        scored = _random_scored_list(rng)
        e = np.exp(scored.scores - scored.scores.max())
        f_dist = e / e.sum()
        ey = np.exp(scored.labels - scored.labels.max())
        y_dist = ey / ey.sum()

        per_term = y_dist * (1.0 - f_dist)
        lv = listwise_loss(scored)
        comp = np.abs(lv.grad)
        sup_listwise = max(sup_listwise, float(comp.max()))

        bad = False
        margin_a = float((per_term - y_dist).max())
        margin_b = float((comp - 1.0).max())
        worst = max(worst, margin_a, margin_b)
        if margin_a > 1e-12 or margin_b > 1e-12:
            bad = True

        pair = pairwise_loss(scored, rng)
        if pair is not None:
            if any(g not in (-1.0, 0.0, 1.0) for g in pair.grad):
                bad = True
        if bad:
            violations += 1
    if sup_listwise > 1.0:
        violations += 1
    return PropertyReport(
        name="gradient_bounds",
        trials=trials,
        violations=violations,
        worst_margin=worst,
        passed=violations == 0,
    )


def empirical_lipschitz(trials: int, rng: Rng) -> tuple[float, float]:
    """Supremum of sampled gradient component magnitudes for both losses.

    The pairwise supremum is exactly 1 by construction (active hinge
    components are +-1); the listwise supremum is strictly below 1.
    """
    sup_listwise = 0.0
    for _ in range(trials):
        scored = _random_scored_list(rng)
        sup_listwise = max(sup_listwise, float(np.abs(listwise_loss(scored).grad).max()))
    return sup_listwise, 1.0


# ---------------------------------------------------------------------------
# loss-value bounds
# ---------------------------------------------------------------------------

#: The largest review-list length in the reference corpora; its base-10 log
#: stays below the label range of 4, which is the side condition for the
#: listwise bound to undercut the pairwise one at that scale.
MAX_REFERENCE_LIST_LENGTH = 2043


def base10_list_length_remark() -> tuple[float, float]:
    """(log10 of the reference maximum list length, label range)."""
    return math.log10(MAX_REFERENCE_LIST_LENGTH), 4.0


def check_loss_bounds(trials: int, score_box: tuple[float, float],
                      rng: Rng, max_list: int = 30) -> PropertyReport:
    """Verify the closed-form ceilings of both losses on box-bounded scores.

    Per sampled product list: the listwise loss is at most
    (f_max - f_min) + ln|R|, and the hinge at most
    (f_max - f_min) + (y_max - y_min).  Whenever ln|R| is at most the label
    range, the listwise ceiling is the smaller one.  The base-10 remark on
    the reference corpus scale is re-evaluated as part of the check.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    f_min, f_max = score_box
    if f_max < f_min:
        raise ValueError("empty score box")
    log10_max, label_range = base10_list_length_remark()
    violations = 0 if log10_max <= label_range else 1
    worst = -math.inf
    for _ in range(trials):
        size = rng.integers(1, max_list + 1)
        scores = rng.uniform(f_min, f_max, size=size)
        labels = np.array([rng.integers(0, N_LABELS) for _ in range(size)])
        scored = ScoredList(scores=scores, labels=labels)

        list_value = listwise_loss(scored).value
        list_bound = (f_max - f_min) + math.log(size)
        margin_list = list_value - list_bound
        worst = max(worst, margin_list)

        pair_bound = (f_max - f_min) + float(labels.max() - labels.min())
        bad = margin_list > JENSEN_TOL
        if size >= 2 and labels.max() > labels.min():
            idx = np.argsort(labels)
            pos, neg = idx[-1], idx[0]
            pair_value = max(0.0, -scores[pos] + scores[neg] + pairwise_margin(labels))
            margin_pair = pair_value - pair_bound
            worst = max(worst, margin_pair)
            if margin_pair > JENSEN_TOL:
                bad = True
            if math.log(size) <= labels.max() - labels.min():
                if list_bound > pair_bound + JENSEN_TOL:
                    bad = True
        if bad:
            violations += 1
    return PropertyReport(
        name="loss_bounds",
        trials=trials,
        violations=violations,
        worst_margin=worst,
        passed=violations == 0,
    )


# ---------------------------------------------------------------------------
# routing analysis
# ---------------------------------------------------------------------------

def leaf_routing_stats(model, dataset: Dataset) -> np.ndarray:
    """Mean leaf-reach distribution per label class, (5 x leaves).

    Rows of label classes absent from the dataset are NaN; every populated
    row sums to 1.
    """
    sums = None
    counts = np.zeros(N_LABELS)
    for product in dataset.products:
        mu = model.routing_product(product)
        if sums is None:
            sums = np.zeros((N_LABELS, mu.shape[1]))
        for row, review in zip(mu, product.reviews):
            sums[review.label] += row
            counts[review.label] += 1
    if sums is None:
        raise ValueError("dataset has no products")
    out = np.full_like(sums, np.nan)
    populated = counts > 0
    out[populated] = sums[populated] / counts[populated, None]
    return out


def routing_stats_to_csv(stats: np.ndarray) -> str:
    n_leaves = stats.shape[1]
    header = "label," + ",".join(f"leaf_{i}" for i in range(n_leaves))
    lines = [header]
    for label, row in enumerate(stats):
        cells = ",".join("nan" if np.isnan(v) else f"{v:.10g}" for v in row)
        lines.append(f"{label},{cells}")
    return "\n".join(lines) + "\n"


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


def run_all_checks(trials: int, seed: int) -> list[PropertyReport]:
    """The full certification battery with one seeded stream per check."""
    root = Rng(seed)
    reports = [
        check_convexity("listwise", trials, root.split(0)),
        check_convexity("pairwise", trials, root.split(1)),
        check_gradient_bounds(trials, root.split(2)),
        check_loss_bounds(trials, (-5.0, 5.0), root.split(3)),
    ]
    sup_list, sup_pair = empirical_lipschitz(trials, root.split(4))
    reports.append(
        PropertyReport(
            name="lipschitz_ordering",
            trials=trials,
            violations=0 if sup_list <= sup_pair else 1,
            worst_margin=sup_list - sup_pair,
            passed=sup_list <= sup_pair,
        )
    )
    bound_list = theorem1_bound(
        BoundInputs(gamma=sup_list, loss_bound=5.0, iterations=100,
                    rates=1e-3, n_samples=200, delta=0.1)
    )
    bound_pair = theorem1_bound(
        BoundInputs(gamma=sup_pair, loss_bound=14.0, iterations=100,
                    rates=1e-3, n_samples=200, delta=0.1)
    )
    reports.append(
        PropertyReport(
            name="bound_ordering",
            trials=1,
            violations=0 if bound_list < bound_pair else 1,
            worst_margin=bound_list - bound_pair,
            passed=bound_list < bound_pair,
        )
    )
    return reports
