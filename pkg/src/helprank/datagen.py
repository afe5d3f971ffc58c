"""Synthetic multimodal review corpora with label-correlated structure.

Each product carries a latent topic; each review mixes that topic with its
own off-topic direction, weighted by a quality factor that grows with the
helpfulness label.  Text and image features share the topic through a fixed
cross-modal map, so cross-modal consistency and product-review relevance
both increase with the label.  Everything is bit-deterministic under a seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numkernel import Rng

#: Vote-count partitions mapped to labels 0..4.  Zero-vote reviews fall in
#: the lowest bucket (the partitions start at one vote).
VOTE_BUCKETS = (2, 4, 8, 16)

#: Inclusive vote ranges used when sampling votes for a target label.
LABEL_VOTE_RANGES = ((0, 1), (2, 3), (4, 7), (8, 15), (16, 31))

N_LABELS = 5


def votes_to_label(votes: int) -> int:
    """Bucket a nonnegative vote count into a helpfulness label 0..4."""
    if votes < 0:
        raise ValueError(f"votes must be nonnegative, got {votes}")
    for label, upper in enumerate(VOTE_BUCKETS):
        if votes < upper:
            return label
    return 4


@dataclass(eq=False)
class ReviewRecord:
    review_id: str
    text_tokens: np.ndarray      # (l x d_tok)
    image_regions: np.ndarray    # (m x d_img)
    votes: int
    label: int

    def __eq__(self, other):
        return (
            isinstance(other, ReviewRecord)
            and self.review_id == other.review_id
            and self.votes == other.votes
            and self.label == other.label
            and np.array_equal(self.text_tokens, other.text_tokens)
            and np.array_equal(self.image_regions, other.image_regions)
        )


@dataclass(eq=False)
class ProductRecord:
    product_id: str
    text_tokens: np.ndarray
    image_regions: np.ndarray
    reviews: list[ReviewRecord]

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.reviews], dtype=np.int64)

    def __eq__(self, other):
        return (
            isinstance(other, ProductRecord)
            and self.product_id == other.product_id
            and np.array_equal(self.text_tokens, other.text_tokens)
            and np.array_equal(self.image_regions, other.image_regions)
            and self.reviews == other.reviews
        )


@dataclass(eq=False)
class Dataset:
    products: list[ProductRecord]
    d_tok: int
    d_img: int
    split_tag: str = "full"

    def n_reviews(self) -> int:
        return sum(len(p.reviews) for p in self.products)

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.d_tok == other.d_tok
            and self.d_img == other.d_img
            and self.products == other.products
        )


@dataclass
class GenConfig:
    n_products: int = 300
    reviews_min: int = 10
    reviews_max: int = 30
    d_tok: int = 32
    d_img: int = 32
    tokens_min: int = 3
    tokens_max: int = 6
    regions_min: int = 2
    regions_max: int = 4
    noise_level: float = 0.1
    label_distribution: tuple = (0.40, 0.25, 0.15, 0.12, 0.08)
    seed: int = 0

    def validate(self) -> None:
        dist = np.asarray(self.label_distribution, dtype=np.float64)
        if dist.shape != (N_LABELS,) or (dist < 0).any():
            raise ValueError("label_distribution needs 5 nonnegative entries")
        if abs(dist.sum() - 1.0) > 1e-9:
            raise ValueError(
                f"label_distribution sums to {dist.sum()!r}, expected 1"
            )
        for lo, hi, name in (
            (self.reviews_min, self.reviews_max, "reviews"),
            (self.tokens_min, self.tokens_max, "tokens"),
            (self.regions_min, self.regions_max, "regions"),
        ):
            if lo < 1 or hi < lo:
                raise ValueError(f"empty {name} range [{lo}, {hi}]")
        if self.reviews_min < 2:
            raise ValueError("products need at least 2 reviews")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.n_products < 1:
            raise ValueError("n_products must be >= 1")


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        v = np.zeros_like(v)
        v[0] = 1.0
        return v
    return v / norm


def _orthogonal_unit(v: np.ndarray, axis: np.ndarray) -> np.ndarray:
    w = v - (v @ axis) * axis
    norm = np.linalg.norm(w)
    if norm < 1e-12:
        # fall back to any direction orthogonal to the axis
        basis = np.zeros_like(axis)
        basis[int(np.argmin(np.abs(axis)))] = 1.0
        w = basis - (basis @ axis) * axis
        norm = np.linalg.norm(w)
    return w / norm


def quality(label: int) -> float:
    """Topic-alignment weight, strictly increasing in the label.

    The square makes adjacent high labels much better aligned than adjacent
    low ones, so the label buckets form clearly partitioned feature levels
    rather than an evenly spaced ramp.
    """
    return ((1.0 + label) / N_LABELS) ** 2


def generate(config: GenConfig) -> Dataset:
    """Draw a synthetic corpus; deterministic given ``config.seed``.

    Product topics live in token space; a fixed cross-modal map sends them
    to region space.  A review with label ``y`` points at the topic with
    weight ``quality(y)`` and at its own orthogonal direction with the
    remainder, so at ``noise_level == 0`` the cosine between review-token
    mean and product topic is strictly increasing in the label.
    """
    config.validate()
    root = Rng(config.seed)
    shared = root.split(0)
    cross_modal = shared.normal(size=(config.d_tok, config.d_img))
    dist = np.asarray(config.label_distribution, dtype=np.float64)
    dist = dist / dist.sum()

    products = []
    for i in range(config.n_products):
        stream = root.split(i + 1)
        topic = _unit(stream.normal(size=config.d_tok))
        image_topic = _unit(topic @ cross_modal)
        # a private alignment scale per product confounds absolute quality
        # across products (a label-4 review of a weak product aligns like a
        # label-3 review of a strong one), so ranking models must read a
        # review's standing relative to its own list, while within-product
        # monotonicity in the label is untouched
        contrast = 0.55 + 0.45 * stream.uniform()

        l_p = stream.integers(config.tokens_min, config.tokens_max + 1)
        m_p = stream.integers(config.regions_min, config.regions_max + 1)
        p_tokens = topic + config.noise_level * stream.normal(size=(l_p, config.d_tok))
        p_regions = image_topic + config.noise_level * stream.normal(
            size=(m_p, config.d_img)
        )

        n_reviews = stream.integers(config.reviews_min, config.reviews_max + 1)
        reviews = []
        for j in range(n_reviews):
            label = stream.choice(N_LABELS, p=dist)
            lo, hi = LABEL_VOTE_RANGES[label]
            votes = stream.integers(lo, hi + 1)
            q = quality(label) * contrast

            off_text = _orthogonal_unit(stream.normal(size=config.d_tok), topic)
            off_img = _orthogonal_unit(stream.normal(size=config.d_img), image_topic)
            text_dir = q * topic + (1.0 - q) * off_text
            img_dir = q * image_topic + (1.0 - q) * off_img

            l_r = stream.integers(config.tokens_min, config.tokens_max + 1)
            m_r = stream.integers(config.regions_min, config.regions_max + 1)
            tokens = text_dir + config.noise_level * stream.normal(
                size=(l_r, config.d_tok)
            )
            regions = img_dir + config.noise_level * stream.normal(
                size=(m_r, config.d_img)
            )
            reviews.append(
                ReviewRecord(
                    review_id=f"p{i:05d}-r{j:03d}",
                    text_tokens=tokens,
                    image_regions=regions,
                    votes=votes,
                    label=label,
                )
            )
        products.append(
            ProductRecord(
                product_id=f"p{i:05d}",
                text_tokens=p_tokens,
                image_regions=p_regions,
                reviews=reviews,
            )
        )
    return Dataset(products, config.d_tok, config.d_img, split_tag="full")


# ---------------------------------------------------------------------------
# JSONL persistence: one product per line, UTF-8, LF line endings
# ---------------------------------------------------------------------------

def _review_to_obj(r: ReviewRecord) -> dict:
    return {
        "review_id": r.review_id,
        "text_tokens": r.text_tokens.tolist(),
        "image_regions": r.image_regions.tolist(),
        "votes": r.votes,
        "label": r.label,
    }


def write_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in dataset.products:
            obj = {
                "product_id": p.product_id,
                "text_tokens": p.text_tokens.tolist(),
                "image_regions": p.image_regions.tolist(),
                "reviews": [_review_to_obj(r) for r in p.reviews],
            }
            fh.write(json.dumps(obj, separators=(",", ":")))
            fh.write("\n")


_PRODUCT_KEYS = {"product_id", "text_tokens", "image_regions", "reviews"}
_REVIEW_KEYS = {"review_id", "text_tokens", "image_regions", "votes", "label"}


def _feature_matrix(raw, line_no: int, what: str) -> np.ndarray:
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError(f"line {line_no}: {what} is not a nonempty 2-D array")
    return arr


def read_jsonl(path, split_tag: str = "full") -> Dataset:
    """Load a JSONL corpus, validating the schema line by line."""
    products: list[ProductRecord] = []
    d_tok = d_img = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                raise ValueError(f"line {line_no}: empty line in JSONL input")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {line_no}: malformed JSON ({exc.msg})")
            if not isinstance(obj, dict) or set(obj) != _PRODUCT_KEYS:
                raise ValueError(
                    f"line {line_no}: product object must have exactly the "
                    f"fields {sorted(_PRODUCT_KEYS)}"
                )
            p_tok = _feature_matrix(obj["text_tokens"], line_no, "text_tokens")
            p_img = _feature_matrix(obj["image_regions"], line_no, "image_regions")
            if d_tok is None:
                d_tok, d_img = p_tok.shape[1], p_img.shape[1]
            reviews = []
            seen_ids = set()
            for r in obj["reviews"]:
                if not isinstance(r, dict) or set(r) != _REVIEW_KEYS:
                    raise ValueError(
                        f"line {line_no}: review object must have exactly the "
                        f"fields {sorted(_REVIEW_KEYS)}"
                    )
                tok = _feature_matrix(r["text_tokens"], line_no, "review text_tokens")
                img = _feature_matrix(
                    r["image_regions"], line_no, "review image_regions"
                )
                for mat, dim, name in ((tok, d_tok, "d_tok"), (img, d_img, "d_img")):
                    if mat.shape[1] != dim:
                        raise ValueError(
                            f"line {line_no}: schema error: {name} is "
                            f"{mat.shape[1]}, expected {dim}"
                        )
                votes = int(r["votes"])
                label = int(r["label"])
                if votes < 0:
                    raise ValueError(f"line {line_no}: negative votes")
                if label != votes_to_label(votes):
                    raise ValueError(
                        f"line {line_no}: label {label} inconsistent with "
                        f"votes {votes}"
                    )
                if r["review_id"] in seen_ids:
                    raise ValueError(
                        f"line {line_no}: duplicate review_id {r['review_id']!r}"
                    )
                seen_ids.add(r["review_id"])
                reviews.append(
                    ReviewRecord(str(r["review_id"]), tok, img, votes, label)
                )
            if len(reviews) < 2:
                raise ValueError(f"line {line_no}: product has fewer than 2 reviews")
            for mat, dim, name in ((p_tok, d_tok, "d_tok"), (p_img, d_img, "d_img")):
                if mat.shape[1] != dim:
                    raise ValueError(
                        f"line {line_no}: schema error: {name} is "
                        f"{mat.shape[1]}, expected {dim}"
                    )
            products.append(
                ProductRecord(str(obj["product_id"]), p_tok, p_img, reviews)
            )
    if d_tok is None:
        return Dataset([], 0, 0, split_tag=split_tag)
    return Dataset(products, d_tok, d_img, split_tag=split_tag)


def split(
    dataset: Dataset, ratios: tuple[float, float, float], seed: int
) -> tuple[Dataset, Dataset, Dataset]:
    """Product-level partition into train/val/test; deterministic given seed."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three nonnegative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios sum to {sum(ratios)!r}, expected 1")
    n = len(dataset.products)
    n_positive = sum(1 for r in ratios if r > 0)
    if n < n_positive:
        raise ValueError(f"cannot split {n} products into {n_positive} parts")

    # largest-remainder allocation so counts always total n
    exact = [n * r for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    remainder = n - sum(counts)
    order = sorted(range(3), key=lambda i: exact[i] - counts[i], reverse=True)
    for i in range(remainder):
        counts[order[i % 3]] += 1

    perm = Rng(seed).permutation(n)
    tags = ("train", "val", "test")
    out = []
    offset = 0
    for count, tag in zip(counts, tags):
        chosen = sorted(perm[offset:offset + count])
        out.append(
            Dataset(
                [dataset.products[i] for i in chosen],
                dataset.d_tok,
                dataset.d_img,
                split_tag=tag,
            )
        )
        offset += count
    return tuple(out)
