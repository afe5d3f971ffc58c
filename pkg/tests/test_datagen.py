"""Synthetic corpus contracts: label bucketing, generation structure,
JSONL round-trips and product-level splitting."""

import io
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helprank import datagen
from helprank.datagen import (
    Dataset,
    GenConfig,
    LABEL_VOTE_RANGES,
    generate,
    read_jsonl,
    split,
    votes_to_label,
    write_jsonl,
)


class TestVotesToLabel:
    @pytest.mark.parametrize("votes,label", [
        (7, 2),      # third partition [4, 8)
        (16, 4),     # open-ended top partition
        (1, 0),      # first partition [1, 2)
        (0, 0),      # below the first partition edge, lowest bucket
        (2, 1), (3, 1), (4, 2), (8, 3), (15, 3), (1000, 4),
    ])
    def test_partition_edges(self, votes, label):
        assert votes_to_label(votes) == label

    def test_negative_votes_rejected(self):
        with pytest.raises(ValueError):
            votes_to_label(-1)

    @given(st.integers(min_value=0, max_value=10**6))
    def test_label_in_range_and_monotone_buckets(self, votes):
        label = votes_to_label(votes)
        assert 0 <= label <= 4
        lo, hi = LABEL_VOTE_RANGES[label][0], None
        if label < 4:
            assert votes < LABEL_VOTE_RANGES[label + 1][0]
        if label > 0:
            assert votes >= LABEL_VOTE_RANGES[label][0]

    @given(st.integers(min_value=0, max_value=10**4))
    def test_sampling_ranges_are_consistent(self, votes):
        label = votes_to_label(votes)
        lo, hi = LABEL_VOTE_RANGES[label]
        assert votes_to_label(lo) == label
        assert votes_to_label(hi) == label


def _small_config(**kw):
    base = dict(
        n_products=6, reviews_min=3, reviews_max=6, d_tok=8, d_img=5,
        tokens_min=2, tokens_max=4, regions_min=1, regions_max=3,
        noise_level=0.1, seed=13,
    )
    base.update(kw)
    return GenConfig(**base)


class TestGenerate:
    def test_labels_match_votes(self):
        ds = generate(_small_config())
        for product in ds.products:
            assert len(product.reviews) >= 2
            for review in product.reviews:
                assert review.label == votes_to_label(review.votes)

    def test_sequence_lengths_respect_ranges(self):
        cfg = _small_config()
        ds = generate(cfg)
        for product in ds.products:
            assert cfg.reviews_min <= len(product.reviews) <= cfg.reviews_max
            for review in product.reviews:
                assert cfg.tokens_min <= review.text_tokens.shape[0] <= cfg.tokens_max
                assert cfg.regions_min <= review.image_regions.shape[0] <= cfg.regions_max
                assert review.text_tokens.shape[1] == cfg.d_tok
                assert review.image_regions.shape[1] == cfg.d_img

    def test_noiseless_alignment_strictly_orders_labels(self):
        # with no noise, the cosine between review-token mean and the
        # product topic must be strictly increasing in the label
        cfg = _small_config(noise_level=0.0, n_products=10, seed=3)
        ds = generate(cfg)
        checked = 0
        for product in ds.products:
            topic = product.text_tokens[0]
            topic = topic / np.linalg.norm(topic)
            by_label = {}
            for review in product.reviews:
                mean = review.text_tokens.mean(axis=0)
                cos = mean @ topic / np.linalg.norm(mean)
                by_label.setdefault(review.label, set()).add(round(cos, 12))
            labels = sorted(by_label)
            for low, high in zip(labels, labels[1:]):
                assert max(by_label[low]) < min(by_label[high])
                checked += 1
        assert checked > 0

    def test_same_seed_bit_identical_serialization(self, tmp_path):
        cfg = _small_config()
        paths = []
        for name in ("a.jsonl", "b.jsonl"):
            path = tmp_path / name
            write_jsonl(generate(cfg), path)
            paths.append(path.read_bytes())
        assert paths[0] == paths[1]

    def test_different_seeds_differ(self):
        a = generate(_small_config(seed=1))
        b = generate(_small_config(seed=2))
        assert a != b

    def test_label_histogram_matches_distribution(self):
        dist = (0.3, 0.25, 0.2, 0.15, 0.1)
        cfg = GenConfig(
            n_products=500, reviews_min=18, reviews_max=22, d_tok=4, d_img=4,
            tokens_min=1, tokens_max=2, regions_min=1, regions_max=2,
            label_distribution=dist, seed=99,
        )
        ds = generate(cfg)
        labels = np.concatenate([p.labels() for p in ds.products])
        assert labels.size >= 9000
        freq = np.bincount(labels, minlength=5) / labels.size
        np.testing.assert_allclose(freq, dist, atol=0.02)

    def test_invalid_distribution_rejected(self):
        with pytest.raises(ValueError, match="label_distribution"):
            generate(_small_config(label_distribution=(0.5, 0.5, 0.5, 0, 0)))

    def test_empty_range_rejected(self):
        with pytest.raises(ValueError, match="range"):
            generate(_small_config(tokens_min=4, tokens_max=2))


class TestJsonl:
    def test_empty_round_trip(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        write_jsonl(Dataset([], 4, 4), path)
        assert path.read_text() == ""
        loaded = read_jsonl(path)
        assert loaded.products == []

    def test_round_trip_equality(self, tmp_path):
        ds = generate(_small_config(n_products=10))
        path = tmp_path / "ds.jsonl"
        write_jsonl(ds, path)
        loaded = read_jsonl(path)
        assert loaded == ds

    def test_truncated_final_line_names_line(self, tmp_path):
        ds = generate(_small_config(n_products=3))
        path = tmp_path / "ds.jsonl"
        write_jsonl(ds, path)
        text = path.read_text()
        path.write_text(text[:-30])  # chop the tail of the final line
        with pytest.raises(ValueError, match="line 3"):
            read_jsonl(path)

    def test_malformed_line_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        ds = generate(_small_config(n_products=2))
        write_jsonl(ds, path)
        lines = path.read_text().splitlines()
        lines.insert(1, "{not json")
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="line 2"):
            read_jsonl(path)

    def test_dimension_inconsistency_is_schema_error(self, tmp_path):
        ds = generate(_small_config(n_products=2))
        path = tmp_path / "ds.jsonl"
        write_jsonl(ds, path)
        lines = path.read_text().splitlines()
        obj = json.loads(lines[1])
        obj["reviews"][0]["text_tokens"] = [[0.0, 1.0]]  # wrong width
        lines[1] = json.dumps(obj)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="schema error.*d_tok"):
            read_jsonl(path)

    def test_inconsistent_label_rejected(self, tmp_path):
        ds = generate(_small_config(n_products=2))
        path = tmp_path / "ds.jsonl"
        write_jsonl(ds, path)
        lines = path.read_text().splitlines()
        obj = json.loads(lines[0])
        obj["reviews"][0]["votes"] = 20
        obj["reviews"][0]["label"] = 0
        lines[0] = json.dumps(obj)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="inconsistent"):
            read_jsonl(path)


class TestSplit:
    def test_everything_to_train(self):
        ds = generate(_small_config(n_products=5))
        train, val, test = split(ds, (1.0, 0.0, 0.0), seed=0)
        assert len(train.products) == 5
        assert len(val.products) == 0 and len(test.products) == 0

    def test_80_10_10(self):
        ds = generate(_small_config(n_products=100, reviews_min=2, reviews_max=3))
        train, val, test = split(ds, (0.8, 0.1, 0.1), seed=1)
        assert (len(train.products), len(val.products), len(test.products)) == (80, 10, 10)

    def test_partition_property(self):
        ds = generate(_small_config(n_products=23))
        parts = split(ds, (0.5, 0.25, 0.25), seed=5)
        ids = [p.product_id for part in parts for p in part.products]
        assert len(ids) == 23
        assert set(ids) == {p.product_id for p in ds.products}

    def test_deterministic(self):
        ds = generate(_small_config(n_products=12))
        a = split(ds, (0.5, 0.3, 0.2), seed=9)
        b = split(ds, (0.5, 0.3, 0.2), seed=9)
        for x, y in zip(a, b):
            assert [p.product_id for p in x.products] == [p.product_id for p in y.products]

    def test_ratio_validation(self):
        ds = generate(_small_config(n_products=4))
        with pytest.raises(ValueError, match="sum"):
            split(ds, (0.5, 0.2, 0.2), seed=0)

    def test_fewer_products_than_splits(self):
        ds = generate(_small_config(n_products=2, reviews_min=2, reviews_max=3))
        with pytest.raises(ValueError, match="split"):
            split(ds, (0.4, 0.3, 0.3), seed=0)
