"""Shapley-value attributions for fitted classifiers.

All attributions are on the model's raw per-class output (``decision``:
logits for LR, margins for GBDT, class frequencies for RF and KNN), computed
on standardized rows, so ``base_value + sum(phi)`` reproduces that output.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numba
import numpy as np

from .ingest import LabeledDataset
from .ingest.split import _largest_remainder
from .models import ForestModel, GBDTModel, TrainedModel

MAX_EXACT_FEATURES = 12
MIN_PERMUTATIONS = 50
BACKGROUND_ROWS = 100


class ExplainError(Exception):
    pass


class TooManyFeatures(ExplainError):
    pass


class ModelKindUnsupported(ExplainError):
    pass


@dataclass
class ShapExplanation:
    class_index: int
    class_value: int
    phi: np.ndarray
    base_value: float
    output: float
    feature_names: tuple
    background_ref: str | None = None
    method: str = ""
    std_err: np.ndarray | None = None
    negligible: np.ndarray | None = None
    probability: float | None = None
    row_id: object = None
    model_hash: str | None = None
    group: tuple | None = None

    @property
    def M(self) -> int:
        return len(self.phi)

    def ranking(self) -> list[str]:
        order = np.argsort(-np.abs(self.phi), kind="stable")
        return [self.feature_names[i] for i in order]

    def top_feature(self) -> str:
        return self.ranking()[0]

    def to_dict(self) -> dict:
        phi = []
        for i, name in enumerate(self.feature_names):
            item = {"feature": name, "value": float(self.phi[i])}
            if self.std_err is not None:
                item["std_err"] = float(self.std_err[i])
                item["negligible"] = bool(self.negligible[i])
            phi.append(item)
        return {
            "row_id": self.row_id,
            "class": self.class_value,
            "class_index": self.class_index,
            "method": self.method,
            "base_value": self.base_value,
            "output": self.output,
            "probability": self.probability,
            "phi": phi,
            "background_ref": self.background_ref,
            "model_hash": self.model_hash,
        }


def _hash_array(Z: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(Z, dtype="<f8").tobytes()).hexdigest()


def background_sample(ds: LabeledDataset, n: int = BACKGROUND_ROWS, seed: int = 0) -> LabeledDataset:
    """Class-stratified sample of ``n`` rows (all rows when ``ds`` is smaller)."""
    if len(ds) <= n:
        return ds
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(ds.y, return_counts=True)
    alloc = _largest_remainder(n, counts.astype(float))
    picks = [rng.permutation(np.flatnonzero(ds.y == c))[:k] for c, k in zip(classes, alloc)]
    return ds.subset(np.sort(np.concatenate(picks)))


def _background_matrix(model: TrainedModel, background) -> tuple[np.ndarray, str]:
    X = background.X if isinstance(background, LabeledDataset) else np.asarray(background, dtype=np.float64)
    Z = model.prepare(X)
    if len(Z) == 0:
        raise ExplainError("background must hold at least one row")
    return Z, _hash_array(X)


def _column(model: TrainedModel, class_index: int) -> int:
    if not 0 <= class_index < len(model.classes):
        raise ExplainError(f"class_index {class_index} outside 0..{len(model.classes) - 1}")
    return int(class_index)


def _finish(model, z, c, phi, base, method, background_ref=None, **extra) -> ShapExplanation:
    out = float(model.decision(z[None, :])[0, c])
    prob = float(model.proba_prepared(z[None, :])[0, c])
    return ShapExplanation(
        class_index=c,
        class_value=int(model.classes[c]),
        phi=np.asarray(phi, dtype=np.float64),
        base_value=float(base),
        output=out,
        feature_names=model.feature_names,
        background_ref=background_ref,
        method=method,
        probability=prob,
        **extra,
    )


# exact enumeration ---------------------------------------------------------


def _shapley_weights(M: int) -> np.ndarray:
    """w[s] = s! (M - s - 1)! / M! for coalition size s."""
    return np.array(
        [math.factorial(s) * math.factorial(M - s - 1) / math.factorial(M) for s in range(M)]
    )


def _interventional_values(model, z, Zb, c) -> np.ndarray:
    """v[mask] = mean output over background with features in ``mask`` from ``z``."""
    M = len(z)
    masks = np.arange(1 << M)
    take = ((masks[:, None] >> np.arange(M)) & 1).astype(bool)
    v = np.empty(len(masks))
    chunk = max(1, 200_000 // len(Zb))
    for s in range(0, len(masks), chunk):
        t = take[s:s + chunk]
        H = np.where(t[:, None, :], z[None, None, :], Zb[None, :, :])
        out = model.decision(H.reshape(-1, M))[:, c]
        v[s:s + chunk] = out.reshape(len(t), len(Zb)).mean(axis=1)
    return v


def _tree_parts(model, c):
    """(trees, output column, per-tree scale, constant offset) of a tree ensemble."""
    if isinstance(model, GBDTModel):
        idx = np.flatnonzero(model.tree_class == c)
        return [model.trees[i] for i in idx], 0, model.learning_rate, float(model.base_score[c])
    if isinstance(model, ForestModel):
        return model.trees, c, 1.0 / len(model.trees), 0.0
    raise ModelKindUnsupported(f"{model.kind or type(model).__name__} has no tree structure")


def _path_dependent_value(tree, col, z, in_s: np.ndarray) -> float:
    def walk(node):
        f = tree.feature[node]
        if f < 0:
            return tree.value[node, col]
        lo, hi = tree.left[node], tree.right[node]
        if in_s[f]:
            return walk(lo if z[f] <= tree.threshold[node] else hi)
        n = tree.n_samples[node]
        return (tree.n_samples[lo] * walk(lo) + tree.n_samples[hi] * walk(hi)) / n

    return walk(0)


def _path_dependent_values(model, z, c) -> np.ndarray:
    trees, col, scale, offset = _tree_parts(model, c)
    M = len(z)
    v = np.full(1 << M, offset)
    for mask in range(1 << M):
        in_s = ((mask >> np.arange(M)) & 1).astype(bool)
        v[mask] += scale * sum(_path_dependent_value(t, col, z, in_s) for t in trees)
    return v


def shapley_exact(
    model: TrainedModel,
    row,
    background=None,
    class_index: int = 0,
    value_function: str = "interventional",
) -> ShapExplanation:
    """Shapley values by enumerating every coalition (2^M model games).

    ``value_function="interventional"`` averages the output over background
    rows with the coalition's features set to ``row``; ``"path_dependent"``
    instead routes absent features down both branches of each tree weighted
    by training cover, which needs no background.
    """
    c = _column(model, class_index)
    z = model.prepare(row)[0]
    M = len(z)
    if M > MAX_EXACT_FEATURES:
        raise TooManyFeatures(f"exact Shapley values need M <= {MAX_EXACT_FEATURES}, got {M}")
    ref = None
    if value_function == "interventional":
        if background is None:
            raise ExplainError("the interventional value function needs a background")
        Zb, ref = _background_matrix(model, background)
        v = _interventional_values(model, z, Zb, c)
    elif value_function == "path_dependent":
        v = _path_dependent_values(model, z, c)
    else:
        raise ValueError(f"unknown value_function {value_function!r}")
    w = _shapley_weights(M)
    sizes = np.array([bin(m).count("1") for m in range(1 << M)])
    phi = np.zeros(M)
    for i in range(M):
        bit = 1 << i
        without = np.flatnonzero((np.arange(1 << M) & bit) == 0)
        phi[i] = np.sum(w[sizes[without]] * (v[without | bit] - v[without]))
    return _finish(model, z, c, phi, v[0], f"exact_{value_function}", ref)


def shapley_by_permutations(value, M: int) -> np.ndarray:
    """Average marginal contribution over all M! orderings; tiny M only.

    ``value`` maps a frozenset of feature indices to a real.
    """
    from itertools import permutations

    phi = np.zeros(M)
    count = 0
    for order in permutations(range(M)):
        s = set()
        prev = value(frozenset(s))
        for i in order:
            s.add(i)
            cur = value(frozenset(s))
            phi[i] += cur - prev
            prev = cur
        count += 1
    return phi / count


def subsets(M: int):
    for size in range(M + 1):
        yield from combinations(range(M), size)


# TreeSHAP ------------------------------------------------------------------


@numba.njit(cache=True)
def _extend(feat, zf, of, pw, off, depth, zero_fraction, one_fraction, feature):
    feat[off + depth] = feature
    zf[off + depth] = zero_fraction
    of[off + depth] = one_fraction
    pw[off + depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        pw[off + i + 1] += one_fraction * pw[off + i] * (i + 1) / (depth + 1)
        pw[off + i] = zero_fraction * pw[off + i] * (depth - i) / (depth + 1)


@numba.njit(cache=True)
def _unwind(feat, zf, of, pw, off, depth, path_index):
    one_fraction = of[off + path_index]
    zero_fraction = zf[off + path_index]
    next_one = pw[off + depth]
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0.0:
            tmp = pw[off + i]
            pw[off + i] = next_one * (depth + 1) / ((i + 1) * one_fraction)
            next_one = tmp - pw[off + i] * zero_fraction * (depth - i) / (depth + 1)
        else:
            pw[off + i] = pw[off + i] * (depth + 1) / (zero_fraction * (depth - i))
    for i in range(path_index, depth):
        feat[off + i] = feat[off + i + 1]
        zf[off + i] = zf[off + i + 1]
        of[off + i] = of[off + i + 1]


@numba.njit(cache=True)
def _unwound_sum(zf, of, pw, off, depth, path_index):
    one_fraction = of[off + path_index]
    zero_fraction = zf[off + path_index]
    next_one = pw[off + depth]
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if one_fraction != 0.0:
            tmp = next_one * (depth + 1) / ((i + 1) * one_fraction)
            total += tmp
            next_one = pw[off + i] - tmp * zero_fraction * (depth - i) / (depth + 1)
        else:
            total += pw[off + i] / zero_fraction / ((depth - i) / (depth + 1))
    return total


@numba.njit(cache=True)
def _tree_shap_kernel(feature, threshold, left, right, value, cover, x, phi, scale, max_depth):
    """Path-dependent TreeSHAP for one tree, accumulated into ``phi``.

    The textbook recursion is unrolled onto an explicit
    stack; each tree level owns a slot of ``width`` path entries, and a child
    copies its parent's slot before extending it.
    """
    width = max_depth + 2
    levels = max_depth + 2
    feat = np.empty(width * levels, dtype=np.int64)
    zf = np.empty(width * levels)
    of = np.empty(width * levels)
    pw = np.empty(width * levels)
    # stack frames: node, level, depth, zero fraction, one fraction, feature
    s_node = np.empty(2 * levels + 2, dtype=np.int64)
    s_level = np.empty(2 * levels + 2, dtype=np.int64)
    s_depth = np.empty(2 * levels + 2, dtype=np.int64)
    s_zero = np.empty(2 * levels + 2)
    s_one = np.empty(2 * levels + 2)
    s_feat = np.empty(2 * levels + 2, dtype=np.int64)
    top = 0
    s_node[0] = 0
    s_level[0] = 0
    s_depth[0] = 0
    s_zero[0] = 1.0
    s_one[0] = 1.0
    s_feat[0] = -1
    top = 1
    while top > 0:
        top -= 1
        node = s_node[top]
        level = s_level[top]
        depth = s_depth[top]
        off = level * width
        if level > 0:
            # copy the parent's path (entries 0..depth-1) into this level's slot
            poff = (level - 1) * width
            for i in range(depth):
                feat[off + i] = feat[poff + i]
                zf[off + i] = zf[poff + i]
                of[off + i] = of[poff + i]
                pw[off + i] = pw[poff + i]
        _extend(feat, zf, of, pw, off, depth, s_zero[top], s_one[top], s_feat[top])
        f = feature[node]
        if f < 0:
            for i in range(1, depth + 1):
                w = _unwound_sum(zf, of, pw, off, depth, i)
                phi[feat[off + i]] += scale * w * (of[off + i] - zf[off + i]) * value[node]
            continue
        if x[f] <= threshold[node]:
            hot = left[node]
            cold = right[node]
        else:
            hot = right[node]
            cold = left[node]
        incoming_zero = 1.0
        incoming_one = 1.0
        path_index = 0
        while path_index <= depth:
            if feat[off + path_index] == f:
                break
            path_index += 1
        if path_index != depth + 1:
            incoming_zero = zf[off + path_index]
            incoming_one = of[off + path_index]
            _unwind(feat, zf, of, pw, off, depth, path_index)
            depth -= 1
        # cold is pushed first so the hot subtree runs next; only frames of
        # this level write its slot, and none runs before the cold child has
        # copied it
        s_node[top] = cold
        s_level[top] = level + 1
        s_depth[top] = depth + 1
        s_zero[top] = cover[cold] / cover[node] * incoming_zero
        s_one[top] = 0.0
        s_feat[top] = f
        top += 1
        s_node[top] = hot
        s_level[top] = level + 1
        s_depth[top] = depth + 1
        s_zero[top] = cover[hot] / cover[node] * incoming_zero
        s_one[top] = incoming_one
        s_feat[top] = f
        top += 1


def _expected_value(tree, col) -> float:
    leaves = tree.is_leaf
    return float(np.sum(tree.n_samples[leaves] * tree.value[leaves, col]) / tree.n_samples[0])


def tree_shap(model: TrainedModel, row, class_index: int = 0) -> ShapExplanation:
    """Path-dependent TreeSHAP, summed over the ensemble's trees.

    GBDT trees are scaled by the learning rate and the base value includes
    the class's initial score; RF trees are averaged.
    """
    c = _column(model, class_index)
    trees, col, scale, offset = _tree_parts(model, c)
    z = model.prepare(row)[0]
    phi = np.zeros(len(z))
    base = offset
    for t in trees:
        base += scale * _expected_value(t, col)
        if t.n_nodes == 1:
            continue
        _tree_shap_kernel(
            t.feature,
            t.threshold,
            t.left,
            t.right,
            np.ascontiguousarray(t.value[:, col]),
            t.n_samples,
            z,
            phi,
            scale,
            t.depth(),
        )
    return _finish(model, z, c, phi, base, "tree_shap")


# permutation sampling ------------------------------------------------------


def sampled_shapley(
    model: TrainedModel,
    row,
    background,
    class_index: int = 0,
    n_permutations: int = 100,
    seed: int = 0,
) -> ShapExplanation:
    """Monte-Carlo Shapley values from random feature orderings.

    Permutation ``j`` starts from background row ``j mod n_background`` and
    switches features to ``row`` one at a time; each switch is one marginal
    contribution sample. The estimate is the sample mean with standard error
    ``std / sqrt(n_permutations)``. The gap between ``sum(phi)`` and
    ``output - base_value`` (base = mean output over the whole background) is
    then spread over the features in proportion to ``|phi|``. Features whose
    final ``|phi|`` is within two standard errors of 0 are flagged negligible.
    """
    if n_permutations < MIN_PERMUTATIONS:
        raise ExplainError(f"n_permutations must be >= {MIN_PERMUTATIONS}")
    c = _column(model, class_index)
    z = model.prepare(row)[0]
    Zb, ref = _background_matrix(model, background)
    M = len(z)
    rng = np.random.default_rng(seed)
    orders = np.array([rng.permutation(M) for _ in range(n_permutations)])
    start = Zb[np.arange(n_permutations) % len(Zb)]
    # H[j, k] = start row j with the first k features of order j switched
    rank = np.argsort(orders, axis=1)
    switched = rank[:, None, :] < np.arange(M + 1)[None, :, None]
    H = np.where(switched, z[None, None, :], start[:, None, :])
    out = model.decision(H.reshape(-1, M))[:, c].reshape(n_permutations, M + 1)
    contrib = np.empty((n_permutations, M))
    contrib[np.arange(n_permutations)[:, None], orders] = np.diff(out, axis=1)
    phi = contrib.mean(axis=0)
    se = contrib.std(axis=0, ddof=1) / math.sqrt(n_permutations)
    base = float(model.decision(Zb)[:, c].mean())
    target = float(model.decision(z[None, :])[0, c]) - base
    gap = target - phi.sum()
    mag = np.abs(phi)
    phi = phi + gap * (mag / mag.sum() if mag.sum() > 0 else np.full(M, 1.0 / M))
    negligible = np.abs(phi) <= 2.0 * se
    return _finish(model, z, c, phi, base, "sampled", ref, std_err=se, negligible=negligible)


def explain(
    model: TrainedModel,
    row,
    class_index: int = 0,
    background=None,
    n_permutations: int = 100,
    seed: int = 0,
) -> ShapExplanation:
    """TreeSHAP for tree ensembles, permutation sampling otherwise."""
    if isinstance(model, (ForestModel, GBDTModel)):
        return tree_shap(model, row, class_index)
    if background is None:
        raise ExplainError(f"{model.kind} explanations need a background sample")
    return sampled_shapley(model, row, background, class_index, n_permutations, seed)


# summaries -----------------------------------------------------------------


@dataclass
class ShapSummary:
    feature_names: tuple
    per_class: dict  # class value -> mean |phi| per feature
    overall: np.ndarray
    n_explanations: int
    occurrences: dict = field(default_factory=dict)
    n_groups: int = 0

    def ranking(self, class_value=None) -> list[str]:
        v = self.overall if class_value is None else self.per_class[class_value]
        return [self.feature_names[i] for i in np.argsort(-v, kind="stable")]

    def to_dict(self) -> dict:
        return {
            "n_explanations": self.n_explanations,
            "ranking": self.ranking(),
            "mean_abs_phi": dict(zip(self.feature_names, self.overall.tolist())),
            "per_class": {
                str(k): dict(zip(self.feature_names, v.tolist())) for k, v in sorted(self.per_class.items())
            },
            "occurrences": self.occurrences,
            "n_groups": self.n_groups,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "occurrences", "mean_abs_phi"])
        for name in self.ranking():
            i = self.feature_names.index(name)
            w.writerow([name, self.occurrences.get(name, 0), repr(float(self.overall[i]))])
        return buf.getvalue()


def shap_summary(explanations, top_k: int = 1) -> ShapSummary:
    """Mean |phi| per class and overall, plus top-feature occurrence counts.

    Explanations sharing a ``group`` (e.g. a (model, cluster) pair) form one
    configuration; each configuration adds one occurrence to each of the
    ``top_k`` features of its mean |phi| ranking. Ungrouped explanations all
    fall in one configuration.
    """
    explanations = list(explanations)
    if not explanations:
        raise ExplainError("need at least one explanation to summarize")
    names = explanations[0].feature_names
    A = np.abs(np.array([e.phi for e in explanations]))
    cls = np.array([e.class_value for e in explanations])
    per_class = {int(k): A[cls == k].mean(axis=0) for k in np.unique(cls)}
    groups: dict = {}
    for e, a in zip(explanations, A):
        groups.setdefault(e.group, []).append(a)
    occ = {n: 0 for n in names}
    for rows in groups.values():
        mean = np.mean(rows, axis=0)
        for i in np.argsort(-mean, kind="stable")[:top_k]:
            occ[names[i]] += 1
    return ShapSummary(names, per_class, A.mean(axis=0), len(explanations), occ, len(groups))


def explanations_json(explanations) -> str:
    return json.dumps([e.to_dict() for e in explanations], indent=2, sort_keys=True)
