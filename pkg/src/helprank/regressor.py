"""Score regressors: a soft binary decision tree and an FCNN baseline.

The tree routes each input through sigmoid split nodes; an input reaches
every leaf with some probability, and the score is the probability-weighted
mean of per-leaf linear scores.  Internal nodes are heap-indexed from 1
(children of node n are 2n and 2n+1) and leaves are numbered left to right,
so the root-to-leaf path follows the leaf index's binary digits.
"""

from __future__ import annotations

import numpy as np

from . import numkernel as nk
from .numkernel import DimensionError, Parameter, Rng, Tensor


def tree_shape(depth: int) -> tuple[int, int]:
    """(number of internal nodes, number of leaves) for a given depth."""
    if depth < 2:
        raise ValueError(f"tree depth must be >= 2, got {depth}")
    leaves = 2 ** (depth - 1)
    return leaves - 1, leaves


def leaf_path(depth: int, leaf: int) -> list[tuple[int, bool]]:
    """Root-to-leaf path as (heap node index, went_right) pairs."""
    n_internal, n_leaves = tree_shape(depth)
    if not 0 <= leaf < n_leaves:
        raise ValueError(f"leaf {leaf} out of range for depth {depth}")
    path = []
    node = 1
    for level in range(depth - 2, -1, -1):
        right = bool((leaf >> level) & 1)
        path.append((node, right))
        node = 2 * node + 1 if right else 2 * node
    return path


#: Half-width of the initial left-to-right spread of leaf biases.  Starting
#: the leaves at distinct score levels gives the routing nodes a nonzero
#: gradient from the first step (with identical leaves the routing would be
#: irrelevant and its parameters would barely train).
LEAF_BIAS_SPREAD = 2.0


class SoftTree:
    """Probabilistic-routing binary tree with linear leaf scorers."""

    def __init__(self, depth: int, dim: int, rng: Rng = None):
        self.depth = depth
        self.dim = dim
        n_internal, n_leaves = tree_shape(depth)
        self.n_internal = n_internal
        self.n_leaves = n_leaves
        if rng is None:
            self.w_nodes = Parameter(np.zeros((dim, n_internal)))
            self.w_leaves = Parameter(np.zeros((dim, n_leaves)))
            self.b_leaves = Parameter(np.zeros((1, n_leaves)))
        else:
            self.w_nodes = nk.init_weight(rng, dim, n_internal)
            self.w_leaves = nk.init_weight(rng, dim, n_leaves)
            self.b_leaves = Parameter(
                np.linspace(-LEAF_BIAS_SPREAD, LEAF_BIAS_SPREAD,
                            n_leaves).reshape(1, -1)
            )
        self.b_nodes = Parameter(np.zeros((1, n_internal)))

    def parameters(self) -> list[Parameter]:
        return [self.w_nodes, self.b_nodes, self.w_leaves, self.b_leaves]

    def _check_input(self, z: Tensor) -> None:
        if z.cols != self.dim:
            raise DimensionError(
                f"input width {z.cols}, tree expects {self.dim}"
            )

    def route_probs(self, z: Tensor) -> Tensor:
        """Leaf-reach probabilities, one row per input row; rows sum to 1.

        Built level by level: the running distribution over the 2^k
        subtrees at level k splits into left/right children and is
        reordered so columns stay in left-to-right leaf order.
        """
        self._check_input(z)
        logits = nk.affine(z, self.w_nodes, self.b_nodes)
        p_left = nk.sigmoid(logits)
        p_right = nk.one_minus(p_left)

        mu = Tensor(np.ones((z.rows, 1)))
        for level in range(self.depth - 1):
            width = 2 ** level
            # heap nodes 2^level .. 2^(level+1)-1 sit in columns shifted by 1
            lo, hi = width - 1, 2 * width - 1
            left = nk.mul(mu, nk.slice_cols(p_left, lo, hi))
            right = nk.mul(mu, nk.slice_cols(p_right, lo, hi))
            paired = nk.concat_cols(left, right)
            interleave = np.empty(2 * width, dtype=np.intp)
            interleave[0::2] = np.arange(width)
            interleave[1::2] = np.arange(width) + width
            mu = nk.permute_cols(paired, interleave)
        return mu

    def leaf_scores(self, z: Tensor) -> Tensor:
        """Per-leaf linear scores, (n x leaves)."""
        self._check_input(z)
        return nk.affine(z, self.w_leaves, self.b_leaves)

    def predict(self, z: Tensor) -> Tensor:
        """Routing-weighted mean of leaf scores, (n x 1)."""
        return nk.sum_cols(nk.mul(self.leaf_scores(z), self.route_probs(z)))


class TreeEnsemble:
    """Additive sum of independent soft trees; a single tree is the default."""

    def __init__(self, depth: int, dim: int, n_trees: int = 1, rng: Rng = None):
        if n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        self.trees = [
            SoftTree(depth, dim, rng.split(t) if rng is not None else None)
            for t in range(n_trees)
        ]
        self.depth = depth
        self.dim = dim

    @property
    def n_leaves(self) -> int:
        return self.trees[0].n_leaves

    def parameters(self) -> list[Parameter]:
        return [p for tree in self.trees for p in tree.parameters()]

    def route_probs(self, z: Tensor) -> Tensor:
        return self.trees[0].route_probs(z)

    def predict(self, z: Tensor) -> Tensor:
        out = self.trees[0].predict(z)
        for tree in self.trees[1:]:
            out = nk.add(out, tree.predict(z))
        return out


class Fcnn:
    """Fully-connected scorer with tanh hidden activations.

    ``widths`` runs from the input width down to 1, e.g. (80, 8, 4, 2, 1).
    A two-entry spec is a plain linear model.
    """

    def __init__(self, widths, rng: Rng = None):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or widths[-1] != 1:
            raise ValueError(f"widths must end at 1, got {widths}")
        self.widths = widths
        self.layers = []
        for fan_in, fan_out in zip(widths, widths[1:]):
            if rng is None:
                w = Parameter(np.zeros((fan_in, fan_out)))
            else:
                w = nk.init_weight(rng, fan_in, fan_out)
            b = Parameter(np.zeros((1, fan_out)))
            self.layers.append((w, b))

    @property
    def dim(self) -> int:
        return self.widths[0]

    def parameters(self) -> list[Parameter]:
        return [p for w, b in self.layers for p in (w, b)]

    def predict(self, z: Tensor) -> Tensor:
        if z.cols != self.widths[0]:
            raise DimensionError(
                f"input width {z.cols}, network expects {self.widths[0]}"
            )
        h = z
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = nk.affine(h, w, b)
            if i != last:
                h = nk.tanh(h)
        return h
