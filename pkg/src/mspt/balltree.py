"""Balanced ball-tree construction and contiguous patch layouts.

A point cloud is recursively bisected into a binary tree of balls. Each node
stores the mean of its members as the center and the largest member distance
as the radius. Splits are exact median splits along the direction found by a
double farthest-point sweep, so sibling counts differ by at most one and the
depth is logarithmic regardless of the point distribution.

Reading the leaves left to right yields a permutation that places spatially
nearby points at nearby positions; cutting that ordering into K equal-length
contiguous blocks gives the patches used by the attention layers. The tree is
built once per sample and the resulting layout is reused across every layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class BallNode:
    center: np.ndarray
    radius: float
    start: int
    stop: int
    depth: int
    left: "BallNode | None" = None
    right: "BallNode | None" = None

    @property
    def is_leaf(self):
        return self.left is None

    @property
    def count(self):
        return self.stop - self.start


@dataclass
class BallTree:
    root: BallNode
    order: np.ndarray
    leaf_capacity: int

    def nodes(self):
        """Iterate all nodes depth-first, parents before children."""
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)

    def leaves(self):
        return [n for n in self.nodes() if n.is_leaf]


def _farthest_from(coords, members, point):
    """Member farthest from a point; ties resolve to the lowest original index."""
    delta = coords[members] - point
    dist = np.einsum("ij,ij->i", delta, delta)
    best = dist.max()
    return int(members[dist == best].min())


def build_tree(coords, leaf_capacity):
    """Build a balanced ball tree over an (N, D) coordinate array.

    Splitting walks from the lowest-index member to its farthest point p, then
    to p's farthest point q, and uses the p-q axis. Points are ordered along
    that axis (ties by original index, q's side to the left) and cut at the
    median, with the left child taking the extra point when the count is odd.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[0] < 1:
        raise ShapeError(f"coords must be (N, D) with N >= 1, got shape {coords.shape}")
    if not np.isfinite(coords).all():
        raise ShapeError("coords contain non-finite values")
    if leaf_capacity < 1:
        raise ConfigError(f"leaf_capacity must be >= 1, got {leaf_capacity}")

    order = np.arange(coords.shape[0], dtype=np.int64)

    def build(start, stop, depth):
        members = order[start:stop]
        pts = coords[members]
        center = pts.mean(axis=0)
        radius = float(np.sqrt(((pts - center) ** 2).sum(axis=1).max()))
        node = BallNode(center=center, radius=radius, start=start, stop=stop, depth=depth)
        count = stop - start
        if count <= leaf_capacity:
            order[start:stop] = np.sort(members)
            return node
        lowest = int(members.min())
        p = _farthest_from(coords, members, coords[lowest])
        q = _farthest_from(coords, members, coords[p])
        direction = coords[p] - coords[q]
        proj = coords[members] @ direction
        ranked = members[np.lexsort((members, proj))]
        order[start:stop] = ranked
        mid = start + (count + 1) // 2
        node.left = build(start, mid, depth + 1)
        node.right = build(mid, stop, depth + 1)
        return node

    root = build(0, coords.shape[0], 1)
    return BallTree(root=root, order=order, leaf_capacity=int(leaf_capacity))


def leaf_order(tree):
    """Permutation placing points in depth-first leaf order: slot i holds
    original point leaf_order[i]."""
    return tree.order.copy()


@dataclass
class PatchLayout:
    """Contiguous equal-length patching of a permuted point sequence.

    Slots [0, n) of the permuted sequence hold real points (perm[i] is the
    original index of slot i); slots [n, n_padded) are padding. valid marks
    real slots, padded_perm repeats perm with -1 in the pad slots.
    """

    perm: np.ndarray
    n: int
    k: int
    l: int
    inverse: np.ndarray = field(init=False)
    n_padded: int = field(init=False)
    valid: np.ndarray = field(init=False)
    padded_perm: np.ndarray = field(init=False)

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        if self.perm.shape != (self.n,):
            raise ShapeError(f"perm shape {self.perm.shape} does not match n={self.n}")
        if np.sort(self.perm).tolist() != list(range(self.n)):
            raise ConfigError("perm is not a bijection on [0, n)")
        if self.l < 1 or self.k < 1:
            raise ConfigError(f"patch geometry k={self.k}, l={self.l} must be positive")
        self.n_padded = self.k * self.l
        if self.n_padded < self.n:
            raise ConfigError(
                f"k*l = {self.n_padded} cannot hold n = {self.n} points"
            )
        self.inverse = np.empty(self.n, dtype=np.int64)
        self.inverse[self.perm] = np.arange(self.n, dtype=np.int64)
        self.valid = np.zeros(self.n_padded, dtype=bool)
        self.valid[: self.n] = True
        self.padded_perm = np.full(self.n_padded, -1, dtype=np.int64)
        self.padded_perm[: self.n] = self.perm

    @property
    def pad_count(self):
        return self.n_padded - self.n


def make_patches(perm, n, k):
    """Cut a permutation into k contiguous patches of length ceil(n/k).

    Padding fills the tail of the last patch. Configurations in which any
    patch would contain no real point (k > n, or more generally
    (k-1)*ceil(n/k) >= n) are rejected.
    """
    if k < 1:
        raise ConfigError(f"patch count k={k} must be >= 1")
    if k > n:
        raise ConfigError(f"patch count k={k} exceeds point count n={n}: empty patches")
    l = -(-n // k)
    if (k - 1) * l >= n:
        raise ConfigError(
            f"patch count k={k} with patch length l={l} leaves an empty patch for n={n}"
        )
    return PatchLayout(perm=perm, n=n, k=k, l=l)


def make_patches_fixed_length(perm, n, k, l):
    """Layout with explicit patch geometry; fully padded patches are allowed.

    Used to show that masked attention is unchanged when extra padded slots,
    up to whole empty patches, are appended after the real points.
    """
    return PatchLayout(perm=perm, n=n, k=k, l=l)


def grid_passthrough_layout(n, k):
    """Identity-permutation layout for data with a natural row-major order."""
    return make_patches(np.arange(n, dtype=np.int64), n, k)
