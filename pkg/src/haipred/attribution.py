"""Per-feature attributions for tree ensembles, in margin (log-odds) space.

Path-dependent Shapley attribution: conditional expectations follow the
trees' own training covers, so a feature "absent" from the coalition routes
through both children weighted by how many training samples went each way.
Contributions plus the base value reconstruct the ensemble margin exactly,
which every caller is entitled to rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .gbdt import GBDTModel, TreeNode


@dataclass
class _PathEntry:
    d: int        # feature index that split on the way here (-1 for the root entry)
    z: float      # fraction of "zero" (feature absent) paths that flow through
    o: float      # fraction of "one" (feature present) paths that flow through
    w: float      # permutation weight accumulated so far


def _extend(m: list[_PathEntry], pz: float, po: float, pi: int) -> list[_PathEntry]:
    length = len(m)
    out = [_PathEntry(e.d, e.z, e.o, e.w) for e in m]
    out.append(_PathEntry(pi, pz, po, 1.0 if length == 0 else 0.0))
    for i in range(length - 1, -1, -1):
        out[i + 1].w += po * out[i].w * (i + 1) / (length + 1)
        out[i].w = pz * out[i].w * (length - i) / (length + 1)
    return out


def _unwind(m: list[_PathEntry], k: int) -> list[_PathEntry]:
    # Surviving weights land in positions 0..len-2; only the (d, z, o)
    # bookkeeping shifts down over the removed slot.
    length = len(m)
    out = [_PathEntry(e.d, e.z, e.o, e.w) for e in m]
    zk, ok = out[k].z, out[k].o
    n = out[length - 1].w
    if ok != 0.0:
        for j in range(length - 2, -1, -1):
            t = out[j].w
            out[j].w = n * length / ((j + 1) * ok)
            n = t - out[j].w * zk * (length - (j + 1)) / length
    else:
        for j in range(length - 2, -1, -1):
            out[j].w = out[j].w * length / (zk * (length - (j + 1)))
    for j in range(k, length - 1):
        out[j].d, out[j].z, out[j].o = out[j + 1].d, out[j + 1].z, out[j + 1].o
    return out[: length - 1]


def _unwound_sum(m: list[_PathEntry], k: int) -> float:
    """Sum of the path weights after unwinding entry k, without mutating."""
    length = len(m)
    zk, ok = m[k].z, m[k].o
    n = m[length - 1].w
    total = 0.0
    if ok != 0.0:
        for j in range(length - 2, -1, -1):
            t = n * length / ((j + 1) * ok)
            total += t
            n = m[j].w - t * zk * (length - (j + 1)) / length
    else:
        for j in range(length - 2, -1, -1):
            total += m[j].w * length / (zk * (length - (j + 1)))
    return total


def _hot_cold(node: TreeNode, x: np.ndarray) -> tuple[TreeNode, TreeNode]:
    value = x[node.feature]
    if np.isnan(value):
        go_left = node.default_left
    else:
        go_left = bool(value < node.threshold)
    return (node.left, node.right) if go_left else (node.right, node.left)


def _shap_recurse(
    node: TreeNode,
    x: np.ndarray,
    phi: np.ndarray,
    m: list[_PathEntry],
    pz: float,
    po: float,
    pi: int,
) -> None:
    m = _extend(m, pz, po, pi)
    if node.is_leaf:
        for i in range(1, len(m)):
            w = _unwound_sum(m, i)
            phi[m[i].d] += w * (m[i].o - m[i].z) * node.weight
        return
    hot, cold = _hot_cold(node, x)
    iz, io = 1.0, 1.0
    k: Optional[int] = None
    for idx in range(1, len(m)):
        if m[idx].d == node.feature:
            k = idx
            break
    if k is not None:
        iz, io = m[k].z, m[k].o
        m = _unwind(m, k)
    _shap_recurse(hot, x, phi, m, iz * hot.cover / node.cover, io, node.feature)
    _shap_recurse(cold, x, phi, m, iz * cold.cover / node.cover, 0.0, node.feature)


def tree_expected_value(node: TreeNode) -> float:
    """Cover-weighted mean leaf value of one tree."""
    if node.is_leaf:
        return node.weight
    total = node.cover
    return (
        node.left.cover / total * tree_expected_value(node.left)
        + node.right.cover / total * tree_expected_value(node.right)
    )


def tree_shap_single(root: TreeNode, x: np.ndarray, n_features: int) -> np.ndarray:
    """Shapley contributions of one tree's output for one sample."""
    phi = np.zeros(n_features, dtype=float)
    if root.is_leaf:
        return phi
    _shap_recurse(root, x, phi, [], 1.0, 1.0, -1)
    return phi


def tree_attribution(model: GBDTModel, x: Sequence[float]) -> tuple[np.ndarray, float]:
    """Per-feature contributions and base value for one sample, margin space.

    contributions.sum() + base equals predict_margin(x) to float precision.
    An empty ensemble attributes nothing and the base is the prior log-odds.
    """
    x = np.asarray(x, dtype=float)
    n_features = len(model.feature_names)
    contribs = np.zeros(n_features, dtype=float)
    base = model.base_score
    for root in model.trees:
        contribs += model.learning_rate * tree_shap_single(root, x, n_features)
        base += model.learning_rate * tree_expected_value(root)
    return contribs, base


def attribution_summary(model: GBDTModel, X: np.ndarray) -> dict[str, float]:
    """Mean absolute contribution per feature over a batch of samples."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    totals = np.zeros(len(model.feature_names), dtype=float)
    for row in X:
        contribs, _ = tree_attribution(model, row)
        totals += np.abs(contribs)
    means = totals / max(len(X), 1)
    return {name: float(means[i]) for i, name in enumerate(model.feature_names)}
