"""Multivariate regression tree: growing, pruning, CV selection, prediction.

Node impurity is the sum of squared Euclidean distances of the J-vector
rows to the node centroid, so a single tree is driven by all responses
at once. Splits are of the form ``x_j <= c`` (routes left) with ``c`` a
midpoint between adjacent distinct observed values. Missing predictor
values are routed through surrogate splits, falling back to the node's
majority direction.
"""

from __future__ import annotations

import copy as _copy
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class GrowControls:
    """Stopping and search controls for tree growing."""

    minsplit: int = 20        # smallest node that may be split
    minbucket: int = 7        # smallest child, counted over rows routed by the primary
    cp: float = 0.01          # required gain as a fraction of root impurity
    maxdepth: int = 30
    max_surrogates: int = 5


@dataclass
class Surrogate:
    predictor: int
    threshold: float
    agreement: float
    left_if_le: bool      # True: x <= threshold routes left, like the primary


@dataclass
class SplitRule:
    predictor: int
    threshold: float
    surrogates: list = field(default_factory=list)
    majority_left: bool = True


@dataclass
class Node:
    n: int
    mean: np.ndarray                  # (J,)
    impurity: float
    split: Optional[SplitRule] = None
    left: Optional["Node"] = None
    right: Optional["Node"] = None
    id: int = -1
    leaf_index: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.split is None


@dataclass
class MultivariateTree:
    root: Node
    n_responses: int
    predictor_names: list = field(default_factory=list)

    def __post_init__(self):
        self.finalize()

    def finalize(self) -> None:
        """Assign preorder node ids and left-to-right leaf indices."""
        counter = {"node": 0, "leaf": 0}

        def walk(node):
            node.id = counter["node"]
            counter["node"] += 1
            if node.is_leaf:
                node.leaf_index = counter["leaf"]
                counter["leaf"] += 1
            else:
                node.leaf_index = -1
                walk(node.left)
                walk(node.right)

        walk(self.root)

    @property
    def n_leaves(self) -> int:
        return len(self.leaves())

    def leaves(self) -> list:
        out = []

        def walk(node):
            if node.is_leaf:
                out.append(node)
            else:
                walk(node.left)
                walk(node.right)

        walk(self.root)
        return out

    def internal_nodes(self) -> list:
        out = []

        def walk(node):
            if not node.is_leaf:
                out.append(node)
                walk(node.left)
                walk(node.right)

        walk(self.root)
        return out

    def leaf_means(self) -> np.ndarray:
        """(L, J) matrix of leaf mean vectors in leaf-index order."""
        return np.array([lf.mean for lf in self.leaves()])

    def training_impurity(self) -> float:
        return float(sum(lf.impurity for lf in self.leaves()))

    # -- routing ---------------------------------------------------------

    def assign(self, X: np.ndarray) -> np.ndarray:
        """Leaf index for every row of X (missing values allowed)."""
        X = np.asarray(X, dtype=float)
        out = np.empty(X.shape[0], dtype=int)

        def walk(node, idx):
            if node.is_leaf:
                out[idx] = node.leaf_index
                return
            go_left = _route_left(node.split, X[idx])
            walk(node.left, idx[go_left])
            walk(node.right, idx[~go_left])

        walk(self.root, np.arange(X.shape[0]))
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        """(n, J) matrix of leaf means for the rows of X."""
        means = self.leaf_means()
        return means[self.assign(X)]

    def copy(self) -> "MultivariateTree":
        return MultivariateTree(_copy.deepcopy(self.root), self.n_responses,
                                list(self.predictor_names))

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        def conv(node):
            d = {"id": int(node.id), "n": int(node.n),
                 "mean": [float(v) for v in np.asarray(node.mean)],
                 "impurity": float(node.impurity)}
            if node.is_leaf:
                d["leaf_index"] = int(node.leaf_index)
            else:
                s = node.split
                name = (self.predictor_names[s.predictor]
                        if s.predictor < len(self.predictor_names) else f"x{s.predictor + 1}")
                d["split"] = {
                    "predictor": int(s.predictor),
                    "predictor_name": name,
                    "threshold": float(s.threshold),
                    "majority_left": bool(s.majority_left),
                    "surrogates": [{"predictor": int(u.predictor),
                                    "predictor_name": (self.predictor_names[u.predictor]
                                                       if u.predictor < len(self.predictor_names)
                                                       else f"x{u.predictor + 1}"),
                                    "threshold": float(u.threshold),
                                    "agreement": float(u.agreement),
                                    "left_if_le": bool(u.left_if_le)}
                                   for u in s.surrogates],
                }
                d["left"] = conv(node.left)
                d["right"] = conv(node.right)
            return d

        return {"n_responses": self.n_responses,
                "predictor_names": list(self.predictor_names),
                "root": conv(self.root)}

    @classmethod
    def from_dict(cls, d: dict) -> "MultivariateTree":
        def conv(nd):
            node = Node(n=nd["n"], mean=np.asarray(nd["mean"], dtype=float),
                        impurity=nd["impurity"])
            if "split" in nd:
                s = nd["split"]
                node.split = SplitRule(
                    predictor=s["predictor"], threshold=s["threshold"],
                    majority_left=s["majority_left"],
                    surrogates=[Surrogate(u["predictor"], u["threshold"],
                                          u["agreement"], u["left_if_le"])
                                for u in s["surrogates"]])
                node.left = conv(nd["left"])
                node.right = conv(nd["right"])
            return node

        return cls(conv(d["root"]), d["n_responses"], list(d["predictor_names"]))


@dataclass
class ComplexityPath:
    """Nested pruning sequence: ``trees[k]`` is optimal for alpha in
    ``[alphas[k], alphas[k+1])``; the last entry is the root-only tree."""

    alphas: list
    trees: list
    impurities: list = field(default_factory=list)

    def __post_init__(self):
        if not self.impurities:
            self.impurities = [t.training_impurity() for t in self.trees]

    def __len__(self) -> int:
        return len(self.alphas)


# ---------------------------------------------------------------------------
# impurity and split search


def node_impurity(Y: np.ndarray) -> float:
    """Sum over rows of squared Euclidean distance to the centroid."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[0] == 0:
        raise ValueError("node_impurity of an empty row set")
    if np.all(Y.max(axis=0) == Y.min(axis=0)):
        return 0.0
    centered = Y - Y.mean(axis=0)
    return float((centered * centered).sum())


def _route_left(split: SplitRule, X: np.ndarray) -> np.ndarray:
    """Boolean left-routing for each row, resolving missing primaries via
    surrogates (highest agreement first) then the majority direction."""
    x = X[:, split.predictor]
    go_left = x <= split.threshold
    missing = np.isnan(x)
    if missing.any():
        for i in np.flatnonzero(missing):
            routed = False
            for sur in split.surrogates:
                v = X[i, sur.predictor]
                if not math.isnan(v):
                    le = v <= sur.threshold
                    go_left[i] = le if sur.left_if_le else not le
                    routed = True
                    break
            if not routed:
                go_left[i] = split.majority_left
    return go_left


def best_split(X: np.ndarray, Y: np.ndarray, controls: GrowControls,
               root_impurity: float):
    """Exhaustive best split of a node, or None when no admissible split
    improves impurity by more than ``cp * root_impurity``.

    For each predictor the candidate thresholds are midpoints between
    consecutive distinct observed values; the gain of a candidate is
    measured on the rows where that predictor is observed. Ties are broken
    toward the lowest predictor index, then the lowest threshold.
    """
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n, k = X.shape
    best = None          # (gain, predictor, threshold)
    gate = controls.cp * root_impurity
    for j in range(k):
        xj = X[:, j]
        obs = ~np.isnan(xj)
        m = int(obs.sum())
        if m < 2 * controls.minbucket:
            continue
        xo = xj[obs]
        yo = Y[obs]
        order = np.argsort(xo)
        xs = xo[order]
        if xs[0] == xs[-1]:
            continue
        ys = yo[order] - yo.mean(axis=0)   # centering improves conditioning
        parent = float((ys * ys).sum())
        if parent == 0.0:
            continue
        csum = np.cumsum(ys, axis=0)
        csum2 = np.cumsum(ys * ys, axis=0)
        total = csum[-1]
        total2 = csum2[-1]
        nl = np.arange(1, m, dtype=float)
        nr = m - nl
        left_sum = csum[:-1]
        left_sq = csum2[:-1]
        imp_left = (left_sq - left_sum * left_sum / nl[:, None]).sum(axis=1)
        right_sum = total - left_sum
        imp_right = ((total2 - left_sq) - right_sum * right_sum / nr[:, None]).sum(axis=1)
        gain = parent - imp_left - imp_right
        valid = ((xs[1:] != xs[:-1]) & (nl >= controls.minbucket)
                 & (nr >= controls.minbucket))
        if not valid.any():
            continue
        gain = np.where(valid, gain, -np.inf)
        p = int(np.argmax(gain))   # first max -> lowest threshold
        g = float(gain[p])
        if g <= gate:
            continue
        if best is None or g > best[0]:
            best = (g, j, float((xs[p] + xs[p + 1]) / 2.0))
    if best is None:
        return None
    _, j, c = best
    return SplitRule(predictor=j, threshold=c)


def _surrogates_for(X: np.ndarray, split: SplitRule, controls: GrowControls):
    """Rank other predictors by how well a single threshold on them
    reproduces the primary routing; agreement is measured against all rows
    where the primary predictor is observed."""
    x = X[:, split.predictor]
    primary_obs = ~np.isnan(x)
    denom = int(primary_obs.sum())
    if denom == 0:
        return [], True
    primary_left = x[primary_obs] <= split.threshold
    n_left = int(primary_left.sum())
    majority_left = n_left >= (denom - n_left)
    found = []
    for s in range(X.shape[1]):
        if s == split.predictor:
            continue
        xs_all = X[primary_obs, s]
        both = ~np.isnan(xs_all)
        m = int(both.sum())
        if m < 1:
            continue
        xv = xs_all[both]
        pl = primary_left[both]
        order = np.argsort(xv)
        xv = xv[order]
        pl = pl[order]
        if xv[0] == xv[-1]:
            continue
        # prefix[u] = #primary-left among first u sorted rows
        prefix = np.cumsum(pl)
        total_left = prefix[-1]
        nl = np.arange(1, m)
        boundary = xv[1:] != xv[:-1]
        if not boundary.any():
            continue
        # aligned: rows with x_s <= c predicted left
        agree_aligned = prefix[:-1] + ((m - nl) - (total_left - prefix[:-1]))
        agree_reversed = m - agree_aligned
        cand_agree = np.where(agree_aligned >= agree_reversed, agree_aligned, agree_reversed)
        cand_agree = np.where(boundary, cand_agree, -1)
        p = int(np.argmax(cand_agree))
        agreement = float(cand_agree[p]) / denom
        found.append(Surrogate(predictor=s,
                               threshold=float((xv[p] + xv[p + 1]) / 2.0),
                               agreement=agreement,
                               left_if_le=bool(agree_aligned[p] >= agree_reversed[p])))
    found.sort(key=lambda u: (-u.agreement, u.predictor))
    return found[:controls.max_surrogates], majority_left


def grow_tree(X: np.ndarray, Y: np.ndarray, controls: GrowControls = None,
              predictor_names=None) -> MultivariateTree:
    """Grow a tree by recursive best-split search until the stopping
    controls (minsplit, minbucket, cp, maxdepth) halt it."""
    controls = controls or GrowControls()
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[0] == 0:
        raise ValueError("grow_tree needs at least one row")
    root_impurity = node_impurity(Y)

    def build(idx: np.ndarray, depth: int) -> Node:
        rows = Y[idx]
        node = Node(n=len(idx), mean=rows.mean(axis=0), impurity=node_impurity(rows))
        if (len(idx) < controls.minsplit or depth >= controls.maxdepth
                or node.impurity == 0.0):
            return node
        split = best_split(X[idx], rows, controls, root_impurity)
        if split is None:
            return node
        split.surrogates, split.majority_left = _surrogates_for(X[idx], split, controls)
        go_left = _route_left(split, X[idx])
        node.split = split
        node.left = build(idx[go_left], depth + 1)
        node.right = build(idx[~go_left], depth + 1)
        return node

    root = build(np.arange(Y.shape[0]), 0)
    names = list(predictor_names) if predictor_names is not None else [
        f"x{j + 1}" for j in range(X.shape[1])]
    return MultivariateTree(root, Y.shape[1], names)


# ---------------------------------------------------------------------------
# cost-complexity pruning


def _subtree_stats(node: Node):
    """(sum of leaf impurities, leaf count) of the subtree at ``node``."""
    if node.is_leaf:
        return node.impurity, 1
    rl, nl = _subtree_stats(node.left)
    rr, nr = _subtree_stats(node.right)
    return rl + rr, nl + nr


def _collapse(node: Node) -> None:
    node.split = None
    node.left = None
    node.right = None


def cost_complexity_path(tree: MultivariateTree) -> ComplexityPath:
    """Weakest-link pruning sequence down to the root-only tree.

    Each alpha is the smallest per-leaf penalty at which collapsing the
    weakest internal node becomes optimal; all nodes at or below that
    penalty are collapsed together so the alphas are strictly increasing.
    """
    work = tree.copy()
    alphas = [0.0]
    trees = [work.copy()]
    while not work.root.is_leaf:
        links = []
        for node in work.internal_nodes():
            r_sub, n_leaves = _subtree_stats(node)
            links.append(((node.impurity - r_sub) / (n_leaves - 1), node))
        alpha = min(g for g, _ in links)
        # collapse every node whose link value is <= alpha, repeating to
        # pick up cascades so the recorded alphas strictly increase
        changed = True
        while changed:
            changed = False
            for node in work.internal_nodes():
                r_sub, n_leaves = _subtree_stats(node)
                if (node.impurity - r_sub) / (n_leaves - 1) <= alpha:
                    _collapse(node)
                    changed = True
                    break
        work.finalize()
        if alpha <= alphas[-1]:
            # zero-gain links (possible in hand-built trees): fold the
            # collapse into the current entry instead of repeating an alpha
            trees[-1] = work.copy()
        else:
            alphas.append(alpha)
            trees.append(work.copy())
    return ComplexityPath(alphas, trees)


def prune_at(path: ComplexityPath, alpha: float) -> MultivariateTree:
    """Subtree optimal at penalty ``alpha``: the entry with the largest
    recorded alpha not exceeding it."""
    pick = 0
    for k, a in enumerate(path.alphas):
        if a <= alpha:
            pick = k
    return path.trees[pick]


# ---------------------------------------------------------------------------
# cross-validated selection


def select_by_cv(X: np.ndarray, Y: np.ndarray, n_folds: int, criterion: str,
                 controls: GrowControls = None, rng: np.random.Generator = None,
                 fold_by_object: bool = False,
                 object_codes: np.ndarray = None) -> MultivariateTree:
    """Grow a tree, then pick a pruned subtree by k-fold cross-validation.

    CV error for each alpha interval of the full-data pruning path is the
    mean over folds of the held-out sum of squared Euclidean prediction
    errors, with fold trees pruned at the interval's geometric midpoint.
    ``min`` takes the smallest error (ties go to the smaller tree);
    ``one_se`` takes the smallest subtree within one standard error of it.
    """
    controls = controls or GrowControls()
    if criterion == "1se":
        criterion = "one_se"
    if criterion not in ("min", "one_se"):
        raise ValueError(f"unknown selection criterion '{criterion}'")
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = Y.shape[0]
    if n_folds < 2:
        raise ValueError("cross-validation needs at least 2 folds")
    if not fold_by_object and n_folds > n:
        raise ValueError("more folds than rows")
    rng = rng or np.random.default_rng()

    full = grow_tree(X, Y, controls)
    path = cost_complexity_path(full)
    n_alphas = len(path)
    if n_alphas == 1:
        return path.trees[0].copy()

    # representative penalty inside each alpha interval
    betas = [0.0]
    for k in range(1, n_alphas - 1):
        betas.append(math.sqrt(path.alphas[k] * path.alphas[k + 1]))
    betas.append(path.alphas[-1])

    if fold_by_object:
        if object_codes is None:
            raise ValueError("fold_by_object requires object_codes")
        groups = np.unique(object_codes)
        if n_folds > len(groups):
            raise ValueError("more folds than objects")
        perm = rng.permutation(len(groups))
        fold_of_group = np.empty(len(groups), dtype=int)
        for f, chunk in enumerate(np.array_split(perm, n_folds)):
            fold_of_group[chunk] = f
        fold_of_row = fold_of_group[np.searchsorted(groups, object_codes)]
        folds = [np.flatnonzero(fold_of_row == f) for f in range(n_folds)]
    else:
        if n_folds > n:
            raise ValueError("more folds than rows")
        perm = rng.permutation(n)
        folds = [np.sort(chunk) for chunk in np.array_split(perm, n_folds)]

    errors = np.zeros((n_alphas, n_folds))
    for f, hold in enumerate(folds):
        train = np.setdiff1d(np.arange(n), hold)
        fold_tree = grow_tree(X[train], Y[train], controls)
        fold_path = cost_complexity_path(fold_tree)
        for k, beta in enumerate(betas):
            pred = prune_at(fold_path, beta).predict(X[hold])
            diff = pred - Y[hold]
            errors[k, f] = float((diff * diff).sum())

    cv_mean = errors.mean(axis=1)
    k_min = int(np.flatnonzero(cv_mean == cv_mean.min()).max())   # simplest among ties
    if criterion == "min":
        k_pick = k_min
    else:
        se = float(errors[k_min].std(ddof=1)) / math.sqrt(n_folds)
        threshold = cv_mean[k_min] + se
        k_pick = int(np.flatnonzero(cv_mean <= threshold).max())
    return path.trees[k_pick].copy()


# ---------------------------------------------------------------------------
# prediction and comparison


def predict_tree(tree: MultivariateTree, x: np.ndarray) -> np.ndarray:
    """Leaf mean vector for a single predictor vector (missing allowed)."""
    x = np.asarray(x, dtype=float)
    return tree.predict(x.reshape(1, -1))[0]


def structure_equal(a: MultivariateTree, b: MultivariateTree) -> bool:
    """True when both trees share binary shape and split variables at each
    internal node; thresholds and leaf values are not compared."""

    def eq(u: Node, v: Node) -> bool:
        if u.is_leaf != v.is_leaf:
            return False
        if u.is_leaf:
            return True
        if u.split.predictor != v.split.predictor:
            return False
        return eq(u.left, v.left) and eq(u.right, v.right)

    return eq(a.root, b.root)
