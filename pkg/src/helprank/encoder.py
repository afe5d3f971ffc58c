"""Coherence-reasoning encoder for product/review pairs.

Per review it fuses three interaction views into one vector of width 5d:
intra-modal (text with text, image with image; width d), inter-modal
(product text with review image and vice versa; width 2d) and intra-entity
(product text with product image, review text with review image; width 2d).
A final attention stage across the review list contextualises each vector
against its competitors.

Text sequences enter through learned per-token linear projections; image
region sequences through a projection followed by self-attention.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numkernel as nk
from .datagen import ProductRecord
from .numkernel import (
    AttentionParams,
    DimensionError,
    Parameter,
    Rng,
    Tensor,
)


@dataclass
class EncoderParams:
    """All learned weights of the encoder, created in a fixed order."""

    w_text_p: Parameter
    b_text_p: Parameter
    w_text_r: Parameter
    b_text_r: Parameter
    w_img_p: Parameter
    b_img_p: Parameter
    w_img_r: Parameter
    b_img_r: Parameter
    attn_vis_p: AttentionParams
    attn_vis_r: AttentionParams
    attn_text_pair: AttentionParams
    attn_img_pair: AttentionParams
    attn_pt_ri: AttentionParams
    attn_pi_rt: AttentionParams
    attn_pt_pi: AttentionParams
    attn_rt_ri: AttentionParams
    attn_list: AttentionParams
    w_conv: Parameter
    b_conv: Parameter
    d_tok: int
    d_img: int
    d: int
    conv_kernel: int

    @classmethod
    def create(
        cls, rng: Rng, d_tok: int, d_img: int, d: int, conv_kernel: int = 3
    ) -> "EncoderParams":
        def linear(fan_in, fan_out):
            return nk.init_weight(rng, fan_in, fan_out), Parameter(
                np.zeros((1, fan_out))
            )

        w_text_p, b_text_p = linear(d_tok, d)
        w_text_r, b_text_r = linear(d_tok, d)
        w_img_p, b_img_p = linear(d_img, d)
        w_img_r, b_img_r = linear(d_img, d)
        attns = [AttentionParams.create(rng, d, d) for _ in range(8)]
        attn_list = AttentionParams.create(rng, 5 * d, 5 * d)
        w_conv, b_conv = linear(conv_kernel * d, d)
        return cls(
            w_text_p, b_text_p, w_text_r, b_text_r,
            w_img_p, b_img_p, w_img_r, b_img_r,
            *attns, attn_list, w_conv, b_conv,
            d_tok=d_tok, d_img=d_img, d=d, conv_kernel=conv_kernel,
        )

    def parameters(self) -> list[Parameter]:
        params = [
            self.w_text_p, self.b_text_p, self.w_text_r, self.b_text_r,
            self.w_img_p, self.b_img_p, self.w_img_r, self.b_img_r,
        ]
        for attn in (
            self.attn_vis_p, self.attn_vis_r,
            self.attn_text_pair, self.attn_img_pair,
            self.attn_pt_ri, self.attn_pi_rt,
            self.attn_pt_pi, self.attn_rt_ri,
            self.attn_list,
        ):
            params.extend(attn.parameters())
        params.extend([self.w_conv, self.b_conv])
        return params


@lru_cache(maxsize=4096)
def _shared_then_own(shared_len: int, lengths: tuple) -> tuple:
    """Gather indices building, per segment, shared rows then own rows.

    The source is the row-concatenation of the shared block (``shared_len``
    rows) and the per-segment stacked blocks (``lengths`` rows each).
    """
    parts = []
    seg = []
    offset = shared_len
    shared = np.arange(shared_len)
    for length in lengths:
        parts.append(shared)
        parts.append(np.arange(offset, offset + length))
        seg.append(shared_len + length)
        offset += length
    return np.concatenate(parts), tuple(seg)


@lru_cache(maxsize=4096)
def _paired(lengths_a: tuple, lengths_b: tuple) -> tuple:
    """Gather indices interleaving two stacked blocks segment by segment."""
    total_a = sum(lengths_a)
    parts = []
    seg = []
    off_a = 0
    off_b = total_a
    for la, lb in zip(lengths_a, lengths_b):
        parts.append(np.arange(off_a, off_a + la))
        parts.append(np.arange(off_b, off_b + lb))
        seg.append(la + lb)
        off_a += la
        off_b += lb
    return np.concatenate(parts), tuple(seg)


class CoherenceEncoder:
    """Maps a product and its review list to list-contextualised vectors."""

    def __init__(self, params: EncoderParams, pooling: str = "mean"):
        if pooling not in ("mean", "max"):
            raise ValueError(f"unknown pooling {pooling!r}")
        self.params = params
        self.pooling = pooling

    # -- primitive stages ---------------------------------------------------

    def _pool(self, x: Tensor) -> Tensor:
        if self.pooling == "mean":
            return nk.mean_pool_rows(x)
        return nk.max_pool_rows(x)

    def encode_text(self, tokens: Tensor, entity: str = "review") -> Tensor:
        """Per-token linear projection into the shared hidden width."""
        p = self.params
        if tokens.cols != p.d_tok:
            raise DimensionError(
                f"token width {tokens.cols}, expected {p.d_tok}"
            )
        if entity == "product":
            return nk.affine(tokens, p.w_text_p, p.b_text_p)
        return nk.affine(tokens, p.w_text_r, p.b_text_r)

    def encode_image(self, regions: Tensor, entity: str = "review") -> Tensor:
        """Projection followed by self-attention over the region sequence."""
        p = self.params
        if regions.cols != p.d_img:
            raise DimensionError(
                f"region width {regions.cols}, expected {p.d_img}"
            )
        if entity == "product":
            projected = nk.affine(regions, p.w_img_p, p.b_img_p)
            return nk.self_attention(projected, p.attn_vis_p)
        projected = nk.affine(regions, p.w_img_r, p.b_img_r)
        return nk.self_attention(projected, p.attn_vis_r)

    def intra_modal(self, h_p, h_r, v_p, v_r) -> Tensor:
        """Text-text and image-image interactions, convolved and pooled to d."""
        p = self.params
        h_pair = nk.self_attention(nk.concat_rows(h_p, h_r), p.attn_text_pair)
        v_pair = nk.self_attention(nk.concat_rows(v_p, v_r), p.attn_img_pair)
        stacked = nk.concat_rows(h_pair, v_pair)
        convolved = nk.conv1d(stacked, p.w_conv, p.b_conv, p.conv_kernel)
        return self._pool(convolved)

    def inter_modal(self, h_p, v_r, v_p, h_r) -> Tensor:
        """Cross-modal branches, pooled and concatenated to width 2d."""
        p = self.params
        z_pt_ri = self._pool(
            nk.self_attention(nk.concat_rows(h_p, v_r), p.attn_pt_ri)
        )
        z_pi_rt = self._pool(
            nk.self_attention(nk.concat_rows(v_p, h_r), p.attn_pi_rt)
        )
        return nk.concat_cols(z_pt_ri, z_pi_rt)

    def intra_entity(self, h_p, v_p, h_r, v_r, product_side: Tensor = None) -> Tensor:
        """Within-entity branches to width 2d.

        The product branch depends only on the product, so callers encoding a
        whole review list pass the precomputed ``product_side`` and share one
        graph node across all reviews.
        """
        p = self.params
        if product_side is None:
            product_side = self.product_branch(h_p, v_p)
        z_rt_ri = self._pool(
            nk.self_attention(nk.concat_rows(h_r, v_r), p.attn_rt_ri)
        )
        return nk.concat_cols(product_side, z_rt_ri)

    def product_branch(self, h_p, v_p) -> Tensor:
        return self._pool(
            nk.self_attention(nk.concat_rows(h_p, v_p), self.params.attn_pt_pi)
        )

    @staticmethod
    def fuse(z_intra_modal, z_inter_modal, z_intra_entity) -> Tensor:
        """Ordered concatenation into the 5d coherence vector."""
        return nk.concat_cols(z_intra_modal, z_inter_modal, z_intra_entity)

    def listwise_attention(self, coherence_rows: list[Tensor]) -> Tensor:
        """Self-attention across the review list, one row per review."""
        if not coherence_rows:
            raise DimensionError("listwise attention on an empty review list")
        stacked = nk.concat_rows(*coherence_rows)
        return nk.self_attention(stacked, self.params.attn_list)

    # -- whole-product encoding ----------------------------------------------

    def encode_review(self, h_p, v_p, product_side, review) -> Tensor:
        h_r = self.encode_text(Tensor(review.text_tokens), "review")
        v_r = self.encode_image(Tensor(review.image_regions), "review")
        z_im = self.intra_modal(h_p, h_r, v_p, v_r)
        z_inter = self.inter_modal(h_p, v_r, v_p, h_r)
        z_intra = self.intra_entity(h_p, v_p, h_r, v_r, product_side=product_side)
        return self.fuse(z_im, z_inter, z_intra)

    def encode_product(
        self, product: ProductRecord, listwise: bool = True, batched: bool = True
    ) -> Tensor:
        """Encode every review of ``product``; output is (|reviews| x 5d).

        The batched path pushes all reviews through each stage at once
        (block-masked attention, segment pooling and convolution); it agrees
        with the review-at-a-time composition to float rounding and is the
        training hot path.  Max pooling has no segment form, so that config
        always takes the review-at-a-time path.
        """
        if batched and self.pooling == "mean":
            return self._encode_product_batched(product, listwise)
        h_p = self.encode_text(Tensor(product.text_tokens), "product")
        v_p = self.encode_image(Tensor(product.image_regions), "product")
        product_side = self.product_branch(h_p, v_p)
        rows = [
            self.encode_review(h_p, v_p, product_side, review)
            for review in product.reviews
        ]
        stacked = nk.concat_rows(*rows)
        if listwise:
            return self._contextualize(stacked)
        return stacked

    def _contextualize(self, fused: Tensor) -> Tensor:
        # each review keeps its own vector and adds what the list-level
        # attention says about its competitors; without the identity term
        # the convex mixing collapses the reviews of a product onto nearly
        # one point at initialisation, which measurably hurts ranking
        return nk.add(fused, nk.self_attention(fused, self.params.attn_list))

    def _encode_product_batched(self, product: ProductRecord, listwise: bool) -> Tensor:
        p = self.params
        reviews = product.reviews
        if not reviews:
            raise DimensionError("product has no reviews")
        token_lens = tuple(r.text_tokens.shape[0] for r in reviews)
        region_lens = tuple(r.image_regions.shape[0] for r in reviews)
        l_p = product.text_tokens.shape[0]
        m_p = product.image_regions.shape[0]

        tokens_all = Tensor(np.concatenate([r.text_tokens for r in reviews]))
        regions_all = Tensor(np.concatenate([r.image_regions for r in reviews]))

        h_p = self.encode_text(Tensor(product.text_tokens), "product")
        v_p = self.encode_image(Tensor(product.image_regions), "product")
        h_all = nk.affine(tokens_all, p.w_text_r, p.b_text_r)
        v_all = nk.self_attention(
            nk.affine(regions_all, p.w_img_r, p.b_img_r),
            p.attn_vis_r,
            lengths=region_lens,
        )

        def shared_plus(shared, shared_len, stacked, lengths, attn):
            idx, seg = _shared_then_own(shared_len, lengths)
            seq = nk.take_rows(nk.concat_rows(shared, stacked), idx)
            return nk.self_attention(seq, attn, lengths=seg), seg

        # intra-modal: [product text; review text] and [product img; review img]
        h_pair, h_seg = shared_plus(h_p, l_p, h_all, token_lens, p.attn_text_pair)
        v_pair, v_seg = shared_plus(v_p, m_p, v_all, region_lens, p.attn_img_pair)
        idx, seg = _paired(h_seg, v_seg)
        stacked = nk.take_rows(nk.concat_rows(h_pair, v_pair), idx)
        convolved = nk.conv1d(stacked, p.w_conv, p.b_conv, p.conv_kernel, lengths=seg)
        z_intra_modal = nk.segment_mean(convolved, seg)

        # inter-modal: [product text; review img] and [product img; review text]
        pt_ri, seg = shared_plus(h_p, l_p, v_all, region_lens, p.attn_pt_ri)
        z_pt_ri = nk.segment_mean(pt_ri, seg)
        pi_rt, seg = shared_plus(v_p, m_p, h_all, token_lens, p.attn_pi_rt)
        z_pi_rt = nk.segment_mean(pi_rt, seg)

        # intra-entity: [product text; product img] shared, [review text; review img]
        product_side = self.product_branch(h_p, v_p)
        z_pt_pi = nk.take_rows(product_side, np.zeros(len(reviews), dtype=np.intp))
        idx, seg = _paired(token_lens, region_lens)
        rt_ri = nk.self_attention(
            nk.take_rows(nk.concat_rows(h_all, v_all), idx),
            p.attn_rt_ri,
            lengths=seg,
        )
        z_rt_ri = nk.segment_mean(rt_ri, seg)

        fused = nk.concat_cols(z_intra_modal, z_pt_ri, z_pi_rt, z_pt_pi, z_rt_ri)
        if listwise:
            return self._contextualize(fused)
        return fused
