import numpy as np
import pytest

from mvreem.simulate import SimulationConfig, generate_pair, true_tree
from mvreem.tree import (
    GrowControls,
    MultivariateTree,
    best_split,
    cost_complexity_path,
    grow_tree,
    node_impurity,
    predict_tree,
    prune_at,
    structure_equal,
)

# ---------------------------------------------------------------------------
# independent oracles (plain enumeration, separate arithmetic)


def oracle_impurity(rows):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    centroid = rows.mean(axis=0)
    return float(((rows - centroid) ** 2).sum())


def oracle_best_split(X, Y, controls, root_impurity):
    """Brute-force search over every (predictor, midpoint) candidate."""
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    best = None
    for j in range(X.shape[1]):
        col = X[:, j]
        obs = ~np.isnan(col)
        xv = np.asarray(sorted(set(col[obs])))
        if len(xv) < 2:
            continue
        sub_x = col[obs]
        sub_y = Y[obs]
        parent = oracle_impurity(sub_y)
        for a, b in zip(xv[:-1], xv[1:]):
            thr = (a + b) / 2.0
            mask = sub_x <= thr
            n_l, n_r = int(mask.sum()), int((~mask).sum())
            if n_l < controls.minbucket or n_r < controls.minbucket:
                continue
            gain = parent - oracle_impurity(sub_y[mask]) - oracle_impurity(sub_y[~mask])
            if gain <= controls.cp * root_impurity:
                continue
            if best is None or gain > best[0]:
                best = (gain, j, thr)
    return None if best is None else (best[1], best[2])


def enumerate_subtrees(node):
    """All pruned subtrees below ``node`` as (leaf positions, R, leaves)."""
    here = [(frozenset([()]), node.impurity, 1)]
    if node.is_leaf:
        return here

    def shift(items, tag):
        return [(frozenset((tag,) + p for p in ps), r, n) for ps, r, n in items]

    out = list(here) if not node.is_leaf else []
    lefts = enumerate_subtrees(node.left)
    rights = enumerate_subtrees(node.right)
    for lp, lr, ln in shift(lefts, "L"):
        for rp, rr, rn in shift(rights, "R"):
            out.append((lp | rp, lr + rr, ln + rn))
    return out


def leaf_positions(tree):
    out = set()

    def walk(node, pos):
        if node.is_leaf:
            out.add(pos)
        else:
            walk(node.left, pos + ("L",))
            walk(node.right, pos + ("R",))

    walk(tree.root, ())
    return frozenset(out)


def internal_positions(tree):
    out = set()

    def walk(node, pos):
        if not node.is_leaf:
            out.add(pos)
            walk(node.left, pos + ("L",))
            walk(node.right, pos + ("R",))

    walk(tree.root, ())
    return set(out)


# ---------------------------------------------------------------------------


class TestNodeImpurity:
    def test_two_point_example(self):
        assert node_impurity(np.array([[0.0, 0.0], [2.0, 2.0]])) == pytest.approx(4.0)

    def test_single_row_zero(self):
        assert node_impurity(np.array([[3.0, -1.0, 2.0]])) == 0.0

    def test_identical_rows_exact_zero(self):
        rows = np.tile([0.1, 0.7], (3, 1))
        assert node_impurity(rows) == 0.0

    def test_coordinate_permutation_invariant(self):
        rng = np.random.default_rng(0)
        rows = rng.normal(size=(12, 3))
        assert node_impurity(rows) == pytest.approx(node_impurity(rows[:, [2, 0, 1]]))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            node_impurity(np.empty((0, 2)))


class TestBestSplit:
    def test_noise_free_two_groups(self):
        X = np.array([[1.0], [2.0], [3.0], [6.0], [7.0], [8.0]])
        Y = np.array([[10.0, 6.0]] * 3 + [[12.0, 8.0]] * 3)
        controls = GrowControls(minsplit=2, minbucket=1, cp=0.0)
        rule = best_split(X, Y, controls, node_impurity(Y))
        assert rule.predictor == 0
        assert rule.threshold == pytest.approx((3.0 + 6.0) / 2.0)

    def test_constant_response_no_split(self):
        X = np.arange(10.0).reshape(-1, 1)
        Y = np.tile([1.5, 2.5], (10, 1))
        controls = GrowControls(minsplit=2, minbucket=1, cp=0.0)
        assert best_split(X, Y, controls, 0.0) is None

    def test_tie_prefers_lower_predictor_index(self):
        # predictors 2 and 3 (1-based) are identical columns: equal gain
        base = np.array([0.0, 0.0, 1.0, 1.0])
        X = np.column_stack([np.array([5.0, -5.0, 5.0, -5.0]), base, base])
        Y = np.array([[0.0], [0.0], [2.0], [2.0]])
        controls = GrowControls(minsplit=2, minbucket=1, cp=0.0)
        rule = best_split(X, Y, controls, node_impurity(Y))
        assert rule.predictor == 1
        assert rule.threshold == pytest.approx(0.5)

    def test_tie_prefers_lower_threshold(self):
        # symmetric response in one predictor: both midpoints give equal gain
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        Y = np.array([[0.0], [1.0], [1.0], [0.0]])
        controls = GrowControls(minsplit=2, minbucket=1, cp=0.0)
        rule = best_split(X, Y, controls, node_impurity(Y))
        oracle = oracle_best_split(X, Y, controls, node_impurity(Y))
        assert (rule.predictor, rule.threshold) == oracle

    def test_matches_exhaustive_oracle_on_random_data(self):
        rng = np.random.default_rng(2024)
        for trial in range(60):
            n = int(rng.integers(5, 51))
            k = int(rng.integers(1, 5))
            J = int(rng.integers(1, 4))
            X = rng.uniform(0, 10, size=(n, k))
            if trial % 3 == 0:        # duplicated values force threshold ties
                X = np.round(X)
            if trial % 4 == 0:        # sprinkle missing predictor cells
                mask = rng.random(size=X.shape) < 0.15
                X[mask] = np.nan
            Y = rng.normal(size=(n, J))
            controls = GrowControls(minsplit=2, minbucket=int(rng.integers(1, 8)),
                                    cp=float(rng.choice([0.0, 0.01])))
            root = oracle_impurity(Y)
            got = best_split(X, Y, controls, root)
            want = oracle_best_split(X, Y, controls, root)
            if want is None:
                assert got is None
            else:
                assert got is not None
                assert (got.predictor, got.threshold) == want


class TestGrowTree:
    def test_recovers_generating_structure_noise_free(self):
        cfg = SimulationConfig(scenario="no_random_effect", n_objects=100,
                               n_times=5, sigma_re=0.0, sigma_eps2=0.0)
        pair = generate_pair(cfg, np.random.default_rng(1))
        tree = grow_tree(pair.train.X, pair.train.Y)
        assert structure_equal(tree, true_tree("simple_bivariate"))
        # leaf means are the exact generating means
        want = {(10.0, 6.0), (11.0, 7.0), (12.0, 8.0), (13.0, 9.0)}
        got = {tuple(np.round(lf.mean, 9)) for lf in tree.leaves()}
        assert got == want

    def test_constant_data_single_leaf(self):
        X = np.arange(30.0).reshape(-1, 1)
        Y = np.tile([4.0, 2.0], (30, 1))
        tree = grow_tree(X, Y)
        assert tree.n_leaves == 1

    def test_depth_limit(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(0, 10, size=(200, 2))
        Y = (X[:, :1] > 5).astype(float) + (X[:, 1:] > 5).astype(float)
        tree = grow_tree(X, Y, GrowControls(minsplit=5, minbucket=2, cp=0.0, maxdepth=1))
        assert tree.n_leaves <= 2

    def test_leaf_means_are_row_means(self):
        rng = np.random.default_rng(4)
        X = rng.uniform(0, 10, size=(120, 3))
        Y = rng.normal(size=(120, 2)) + (X[:, :2] > 5.0)
        tree = grow_tree(X, Y, GrowControls(minsplit=10, minbucket=4, cp=0.001))
        memb = tree.assign(X)
        for leaf in tree.leaves():
            rows = Y[memb == leaf.leaf_index]
            assert len(rows) == leaf.n
            assert np.allclose(rows.mean(axis=0), leaf.mean, atol=1e-12)

    def test_impurity_decomposition(self):
        rng = np.random.default_rng(5)
        X = rng.uniform(0, 10, size=(150, 3))
        Y = rng.normal(size=(150, 2)) + 2.0 * (X[:, :2] > 5.0)
        tree = grow_tree(X, Y, GrowControls(minsplit=10, minbucket=3, cp=0.0))

        def walk(node):
            if node.is_leaf:
                return
            assert node.impurity - node.left.impurity - node.right.impurity >= -1e-9
            walk(node.left)
            walk(node.right)

        walk(tree.root)


class TestComplexityPath:
    def test_single_leaf_path(self):
        tree = grow_tree(np.zeros((5, 1)), np.ones((5, 1)))
        path = cost_complexity_path(tree)
        assert len(path) == 1
        assert path.alphas == [0.0]

    def test_two_leaf_hand_computed(self):
        X = np.array([[0.0], [0.0], [1.0], [1.0]])
        Y = np.array([[0.0], [0.0], [2.0], [2.0]])
        tree = grow_tree(X, Y, GrowControls(minsplit=2, minbucket=1, cp=0.0))
        assert tree.n_leaves == 2
        path = cost_complexity_path(tree)
        # collapsing the root costs its full impurity decrease of 4
        assert path.alphas == pytest.approx([0.0, 4.0])
        assert path.trees[1].n_leaves == 1

    def test_monotone_path_properties(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            X = rng.uniform(0, 10, size=(80, 3))
            Y = rng.normal(size=(80, 2)) + (X[:, :2] > 5.0)
            tree = grow_tree(X, Y, GrowControls(minsplit=6, minbucket=2, cp=0.0))
            path = cost_complexity_path(tree)
            assert path.trees[-1].n_leaves == 1
            for k in range(1, len(path)):
                assert path.alphas[k] > path.alphas[k - 1]
                assert path.trees[k].n_leaves < path.trees[k - 1].n_leaves
                assert (path.trees[k].training_impurity()
                        >= path.trees[k - 1].training_impurity() - 1e-9)

    def test_nested_and_optimal_vs_enumeration(self):
        rng = np.random.default_rng(7)
        for _ in range(8):
            X = rng.uniform(0, 10, size=(60, 2))
            Y = rng.normal(size=(60, 2)) + 1.5 * (X > 5.0)
            tree = grow_tree(X, Y, GrowControls(minsplit=8, minbucket=3, cp=0.0))
            if tree.n_leaves > 7:
                continue
            path = cost_complexity_path(tree)
            candidates = enumerate_subtrees(tree.root)
            prev_internal = None
            for alpha, subtree in zip(path.alphas, path.trees):
                cost = subtree.training_impurity() + alpha * subtree.n_leaves
                best = min(r + alpha * n for _, r, n in candidates)
                assert cost <= best + 1e-9
                smallest = min(n for _, r, n in candidates
                               if r + alpha * n <= best + 1e-9)
                assert subtree.n_leaves == smallest
                internal = internal_positions(subtree)
                if prev_internal is not None:
                    assert internal <= prev_internal
                prev_internal = internal

    def test_prune_at_picks_interval(self):
        X = np.array([[0.0], [0.0], [1.0], [1.0]])
        Y = np.array([[0.0], [0.0], [2.0], [2.0]])
        path = cost_complexity_path(
            grow_tree(X, Y, GrowControls(minsplit=2, minbucket=1, cp=0.0)))
        assert prune_at(path, 3.9).n_leaves == 2
        assert prune_at(path, 4.0).n_leaves == 1
        assert prune_at(path, 100.0).n_leaves == 1


class TestPredictRouting:
    def build_surrogate_tree(self):
        # x1 and x2 move together, so x2 is a perfect surrogate for x1
        rng = np.random.default_rng(8)
        x1 = rng.uniform(0, 10, size=200)
        X = np.column_stack([x1, x1 + 0.001 * rng.random(200)])
        Y = np.where(x1 <= 5.0, 1.0, 3.0).reshape(-1, 1)
        return grow_tree(X, Y, GrowControls(minsplit=10, minbucket=5, cp=0.0))

    def test_perfect_surrogate_routes_like_primary(self):
        tree = self.build_surrogate_tree()
        sur = tree.root.split.surrogates[0]
        assert sur.predictor == 1
        assert sur.agreement == pytest.approx(1.0)
        full = np.array([3.0, 3.0005])
        masked = np.array([np.nan, 3.0005])
        assert np.array_equal(predict_tree(tree, full), predict_tree(tree, masked))
        full_hi = np.array([8.0, 8.0005])
        masked_hi = np.array([np.nan, 8.0005])
        assert np.array_equal(predict_tree(tree, full_hi), predict_tree(tree, masked_hi))

    def test_majority_fallback_when_all_missing(self):
        tree = self.build_surrogate_tree()
        pred = predict_tree(tree, np.array([np.nan, np.nan]))
        side = tree.root.left if tree.root.split.majority_left else tree.root.right
        assert np.array_equal(pred, side.mean)

    def test_single_leaf_ignores_x(self):
        tree = grow_tree(np.zeros((5, 2)), np.full((5, 1), 7.0))
        assert predict_tree(tree, np.array([np.nan, 123.0]))[0] == pytest.approx(7.0)

    def test_every_row_routes_to_one_leaf(self):
        rng = np.random.default_rng(9)
        X = rng.uniform(0, 10, size=(300, 3))
        Y = rng.normal(size=(300, 2)) + (X[:, :2] > 5.0)
        tree = grow_tree(X, Y, GrowControls(minsplit=10, minbucket=4, cp=0.0))
        memb = tree.assign(X)
        assert memb.min() >= 0 and memb.max() < tree.n_leaves
        # indicator routing sums to exactly one leaf per row by construction
        counts = np.bincount(memb, minlength=tree.n_leaves)
        assert counts.sum() == 300


class TestStructureEqual:
    def test_tree_vs_itself(self):
        t = true_tree("simple_bivariate")
        assert structure_equal(t, t)

    def test_different_variable(self):
        a = true_tree("simple_bivariate")
        b = true_tree("simple_bivariate")
        b.root.split.predictor = 5
        assert not structure_equal(a, b)

    def test_thresholds_ignored(self):
        a = true_tree("simple_bivariate")
        b = true_tree("simple_bivariate")
        b.root.split.threshold = 5.3
        assert structure_equal(a, b)

    def test_different_shape(self):
        a = true_tree("simple_bivariate")
        b = true_tree("complex_bivariate")
        assert not structure_equal(a, b)


class TestSerialization:
    def test_round_trip_preserves_predictions(self):
        rng = np.random.default_rng(10)
        X = rng.uniform(0, 10, size=(150, 3))
        X[rng.random(size=X.shape) < 0.05] = np.nan
        Y = rng.normal(size=(150, 2)) + 2.0 * np.nan_to_num(X[:, :2] > 5.0)
        tree = grow_tree(X, Y, GrowControls(minsplit=10, minbucket=4, cp=0.001))
        clone = MultivariateTree.from_dict(tree.to_dict())
        X_new = rng.uniform(0, 10, size=(50, 3))
        X_new[rng.random(size=X_new.shape) < 0.2] = np.nan
        assert np.array_equal(tree.predict(X_new), clone.predict(X_new))

    def test_dict_contains_names_and_counts(self):
        X = np.array([[0.0, 9.0], [0.0, 9.0], [1.0, 9.0], [1.0, 9.0]])
        Y = np.array([[0.0], [0.0], [2.0], [2.0]])
        tree = grow_tree(X, Y, GrowControls(minsplit=2, minbucket=1, cp=0.0),
                         predictor_names=["age", "dose"])
        d = tree.to_dict()
        assert d["root"]["split"]["predictor_name"] == "age"
        assert d["root"]["n"] == 4
