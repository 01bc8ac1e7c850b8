"""Binary decision trees stored as flat node arrays, and their builders.

Node ``i`` is a leaf when ``feature[i] == -1``; otherwise rows with
``x[feature[i]] <= threshold[i]`` go to ``left[i]``. ``n_samples`` is the
number of training rows that reached the node (bootstrap duplicates counted),
which path-dependent Shapley values use as the node cover.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

LEAF = -1


@dataclass(eq=False)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, n_outputs)
    n_samples: np.ndarray
    impurity: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature == LEAF

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] != LEAF:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] != LEAF)
        while len(active):
            n = node[active]
            go_left = X[active, self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = active[self.feature[node[active]] != LEAF]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


class _Nodes:
    def __init__(self, n_outputs: int):
        self.n_outputs = n_outputs
        self.feature, self.threshold, self.left, self.right = [], [], [], []
        self.value, self.n_samples, self.impurity = [], [], []

    def add(self, value, n, impurity) -> int:
        self.feature.append(LEAF)
        self.threshold.append(0.0)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.value.append(value)
        self.n_samples.append(float(n))
        self.impurity.append(float(impurity))
        return len(self.feature) - 1

    def split(self, node, feature, threshold, left, right):
        self.feature[node] = int(feature)
        self.threshold[node] = float(threshold)
        self.left[node] = left
        self.right[node] = right

    def build(self) -> Tree:
        return Tree(
            np.array(self.feature, dtype=np.int64),
            np.array(self.threshold, dtype=np.float64),
            np.array(self.left, dtype=np.int64),
            np.array(self.right, dtype=np.int64),
            np.array(self.value, dtype=np.float64).reshape(len(self.feature), self.n_outputs),
            np.array(self.n_samples, dtype=np.float64),
            np.array(self.impurity, dtype=np.float64),
        )


def _midpoint(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    mid = lo + (hi - lo) / 2.0
    return np.where(mid < hi, mid, lo)


def build_cart(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    *,
    max_depth: int | None = None,
    max_features: int | None = None,
    min_samples_split: int = 2,
    min_samples_leaf: int = 1,
    rng: np.random.Generator | None = None,
) -> Tree:
    """Grow a Gini-impurity classification tree; leaves hold class frequencies.

    At each node features are visited in random order until ``max_features``
    non-constant ones have been scored; the lowest weighted child impurity
    wins (first found on ties). Impure nodes always split if any valid split
    exists, even one that does not reduce impurity.
    """
    n, d = X.shape
    k = d if max_features is None else max(1, min(int(max_features), d))
    rng = rng or np.random.default_rng(0)
    onehot = np.eye(n_classes)[y]
    nodes = _Nodes(n_classes)

    def stats(idx):
        counts = onehot[idx].sum(axis=0)
        p = counts / len(idx)
        return p, 1.0 - float(p @ p), counts

    p, imp, counts = stats(np.arange(n))
    root = nodes.add(p, n, imp)
    stack = [(root, np.arange(n), 0, counts)]
    while stack:
        node, idx, depth, counts = stack.pop()
        m = len(idx)
        if (
            nodes.impurity[node] <= 0.0
            or m < min_samples_split
            or (max_depth is not None and depth >= max_depth)
        ):
            continue
        best = None  # (score, feature, threshold)
        visited = 0
        for f in rng.permutation(d):
            if visited >= k:
                break
            xs = X[idx, f]
            if xs.min() == xs.max():
                continue
            visited += 1
            order = np.argsort(xs, kind="stable")
            xs = xs[order]
            left_counts = np.cumsum(onehot[idx[order]], axis=0)[:-1]
            nl = np.arange(1, m, dtype=np.float64)
            nr = m - nl
            right_counts = counts - left_counts
            gl = 1.0 - (left_counts ** 2).sum(axis=1) / nl ** 2
            gr = 1.0 - (right_counts ** 2).sum(axis=1) / nr ** 2
            score = (nl * gl + nr * gr) / m
            valid = (xs[:-1] < xs[1:]) & (nl >= min_samples_leaf) & (nr >= min_samples_leaf)
            if not valid.any():
                continue
            score = np.where(valid, score, np.inf)
            i = int(np.argmin(score))
            if best is None or score[i] < best[0]:
                best = (score[i], f, _midpoint(xs[i], xs[i + 1]).item())
        if best is None:
            continue
        _, f, thr = best
        go_left = X[idx, f] <= thr
        children = []
        for part in (idx[go_left], idx[~go_left]):
            p, imp, c = stats(part)
            children.append((nodes.add(p, len(part), imp), part, c))
        nodes.split(node, f, thr, children[0][0], children[1][0])
        # right pushed first so the left subtree is numbered first
        for child, part, c in reversed(children):
            stack.append((child, part, depth + 1, c))
    return nodes.build()


def bin_edges(X: np.ndarray, max_bins: int) -> list[np.ndarray]:
    """Per-feature cut points; at most ``max_bins`` bins per feature.

    Features with few distinct values cut halfway between neighbours; others
    cut at training-data quantiles.
    """
    cuts = []
    for col in X.T:
        uniq = np.unique(col)
        if len(uniq) <= max_bins:
            c = _midpoint(uniq[:-1], uniq[1:])
        else:
            qs = np.quantile(col, np.linspace(0.0, 1.0, max_bins + 1)[1:-1])
            c = np.unique(qs)
            c = c[c < uniq[-1]]
        cuts.append(np.unique(c))
    return cuts


def apply_bins(X: np.ndarray, cuts: list[np.ndarray]) -> np.ndarray:
    out = np.empty(X.shape, dtype=np.uint8)
    for j, c in enumerate(cuts):
        out[:, j] = np.searchsorted(c, X[:, j], side="left")
    return out


def build_hist_tree(
    bins: np.ndarray,
    cuts: list[np.ndarray],
    g: np.ndarray,
    h: np.ndarray,
    *,
    max_depth: int,
    l2: float,
    min_child_weight: float = 1e-3,
    min_samples_leaf: int = 1,
):
    """Second-order regression tree over pre-binned features.

    Leaf weight is ``-G / (H + l2)`` and a split's gain is
    ``(GL^2/(HL+l2) + GR^2/(HR+l2) - G^2/(H+l2)) / 2``. Returns the tree and
    the leaf index of every training row.
    """
    n, d = bins.shape
    B = 256
    offsets = np.arange(d, dtype=np.int64) * B
    n_bins = np.array([len(c) + 1 for c in cuts])
    # bin b of feature f is a legal split point only if a cut exists at b
    legal = np.arange(B)[None, :] < (n_bins - 1)[:, None]
    nodes = _Nodes(1)
    leaf_of = np.zeros(n, dtype=np.int64)

    def weight(G, H):
        return -G / (H + l2)

    idx = np.arange(n)
    G, H = float(g.sum()), float(h.sum())
    root = nodes.add([weight(G, H)], n, 0.0)
    stack = [(root, idx, 0, G, H)]
    while stack:
        node, idx, depth, G, H = stack.pop()
        m = len(idx)
        if depth >= max_depth or m < 2 * min_samples_leaf:
            leaf_of[idx] = node
            continue
        flat = (bins[idx].astype(np.int64) + offsets).ravel()
        size = d * B
        Gh = np.bincount(flat, weights=np.repeat(g[idx], d), minlength=size).reshape(d, B)
        Hh = np.bincount(flat, weights=np.repeat(h[idx], d), minlength=size).reshape(d, B)
        Ch = np.bincount(flat, minlength=size).reshape(d, B)
        GL, HL, CL = Gh.cumsum(axis=1), Hh.cumsum(axis=1), Ch.cumsum(axis=1)
        GR, HR, CR = G - GL, H - HL, m - CL
        gain = 0.5 * (GL ** 2 / (HL + l2) + GR ** 2 / (HR + l2) - G ** 2 / (H + l2))
        ok = (
            legal
            & (CL >= min_samples_leaf)
            & (CR >= min_samples_leaf)
            & (HL >= min_child_weight)
            & (HR >= min_child_weight)
        )
        gain = np.where(ok, gain, -np.inf)
        flat_best = int(np.argmax(gain))
        f, b = divmod(flat_best, B)
        if not gain[f, b] > 0.0:
            leaf_of[idx] = node
            continue
        go_left = bins[idx, f] <= b
        li, ri = idx[go_left], idx[~go_left]
        gl, hl = float(GL[f, b]), float(HL[f, b])
        gr, hr = G - gl, H - hl
        left = nodes.add([weight(gl, hl)], len(li), 0.0)
        right = nodes.add([weight(gr, hr)], len(ri), 0.0)
        nodes.split(node, f, cuts[f][b], left, right)
        stack.append((right, ri, depth + 1, gr, hr))
        stack.append((left, li, depth + 1, gl, hl))
    return nodes.build(), leaf_of


@numba.njit(cache=True)
def _walk(X, feature, threshold, left, right):
    n, T = X.shape[0], feature.shape[0]
    out = np.empty((n, T), dtype=np.int64)
    for i in range(n):
        for t in range(T):
            node = 0
            while left[t, node] != node:
                if X[i, feature[t, node]] <= threshold[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
            out[i, t] = node
    return out


class TreeStack:
    """Several trees padded into 2-D arrays and walked by one compiled loop.

    Leaves point to themselves, which is how the walk recognises them.
    """

    def __init__(self, trees: list[Tree]):
        self.n_trees = len(trees)
        width = max((t.n_nodes for t in trees), default=1)
        n_out = trees[0].value.shape[1] if trees else 1
        T = max(self.n_trees, 1)
        self.feature = np.zeros((T, width), dtype=np.int64)
        self.threshold = np.zeros((T, width), dtype=np.float64)
        self.left = np.tile(np.arange(width, dtype=np.int64), (T, 1))
        self.right = self.left.copy()
        self.value = np.zeros((T, width, n_out), dtype=np.float64)
        for t, tree in enumerate(trees):
            n = tree.n_nodes
            inner = ~tree.is_leaf
            self.feature[t, :n] = np.where(inner, tree.feature, 0)
            self.threshold[t, :n] = tree.threshold
            self.left[t, :n] = np.where(inner, tree.left, np.arange(n))
            self.right[t, :n] = np.where(inner, tree.right, np.arange(n))
            self.value[t, :n] = tree.value
        self._tree_ix = np.arange(T)[None, :]

    def leaves(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _walk(X, self.feature, self.threshold, self.left, self.right)

    def values(self, X: np.ndarray) -> np.ndarray:
        """(n_rows, n_trees, n_outputs) leaf values."""
        if self.n_trees == 0:
            return np.zeros((len(X), 0, self.value.shape[2]))
        return self.value[self._tree_ix, self.leaves(X)]


def pack_trees(trees: list[Tree]) -> dict:
    """Concatenate trees into a few flat arrays for persistence."""
    counts = np.array([t.n_nodes for t in trees], dtype=np.int64)
    n_out = trees[0].value.shape[1] if trees else 1

    def cat(attr, dtype, shape=()):
        if not trees:
            return np.zeros((0,) + shape, dtype=dtype)
        return np.concatenate([getattr(t, attr) for t in trees]).astype(dtype)

    return {
        "tree_sizes": counts,
        "feature": cat("feature", np.int64),
        "threshold": cat("threshold", np.float64),
        "left": cat("left", np.int64),
        "right": cat("right", np.int64),
        "value": cat("value", np.float64, (n_out,)),
        "n_samples": cat("n_samples", np.float64),
        "impurity": cat("impurity", np.float64),
    }


def unpack_trees(p: dict) -> list[Tree]:
    trees = []
    start = 0
    for size in p["tree_sizes"]:
        sl = slice(start, start + int(size))
        trees.append(
            Tree(
                p["feature"][sl].copy(),
                p["threshold"][sl].copy(),
                p["left"][sl].copy(),
                p["right"][sl].copy(),
                p["value"][sl].copy(),
                p["n_samples"][sl].copy(),
                p["impurity"][sl].copy(),
            )
        )
        start += int(size)
    return trees
