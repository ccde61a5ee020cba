import numpy as np
import pytest

import bsforest as bf
from bsforest import rng as brng
from bsforest.leafmodel import LinearModel
from bsforest.tree import ChildTree, TrainContext


def unit_cell(d=2):
    return bf.Cell(0, bf.AxisBox(np.zeros(d), np.ones(d)))


def cell_data(n, d=2, seed=0):
    rng = np.random.default_rng(seed)
    return bf.Dataset(rng.random((n, d)), rng.random(n))


def ctx_for(data, full_n=None):
    return TrainContext(
        full_n=full_n if full_n is not None else max(len(data), 1),
        target_bound=data.target_bound,
        global_mean=float(data.targets.mean()) if len(data) else 0.0,
    )


def manual_child(tree, values, pending, cell=None):
    values = np.asarray(values, dtype=np.float64)
    pending = np.asarray(pending, dtype=bool)
    return ChildTree(
        cell=cell if cell is not None else bf.Cell(0, bf.AxisBox(tree.root_lower, tree.root_upper)),
        partition=tree,
        leaf_values=values,
        special_models={},
        pending_mask=pending,
        filled_mask=np.zeros_like(pending),
        splits_used=tree.n_splits,
        score=0.0,
        candidate_index=0,
    )


def one_d_tree(cuts):
    """1-d axis tree on [0, 6] with the requested cut coordinates."""
    root = bf.Cell(0, bf.AxisBox(np.array([0.0]), np.array([6.0])))
    tree = bf.build_stage_two(
        root, bf.Dataset(np.empty((0, 1)), np.empty(0)), 0, 1, "axis_parallel",
        bf.RandomStream(0), pure=True,
    )
    leaf = 0
    lo, hi = 0.0, 6.0
    for cut in cuts:
        ratio = (cut - lo) / (hi - lo)
        tree = bf.apply_axis_split(tree, bf.AxisSplit(leaf, 0, ratio))
        leaf = tree.n_leaves - 1
        lo = cut
    return tree


class TestBuildCandidate:
    def test_empty_cell_predicts_global_mean(self):
        data = cell_data(0)
        ctx = TrainContext(full_n=100, target_bound=3.0, global_mean=1.25)
        child = bf.build_candidate(unit_cell(), data, bf.HyperParams(), bf.RandomStream(0), ctx=ctx)
        assert child.splits_used == 0
        assert child.predict_batch(np.array([[0.5, 0.5]]))[0] == 1.25

    def test_zero_budget_is_cell_mean(self):
        data = cell_data(20, seed=3)
        params = bf.HyperParams(scoring="penalized_risk")
        child = bf.build_candidate(
            unit_cell(), data, params, bf.RandomStream(1), ctx=ctx_for(data), budget=0
        )
        preds = child.predict_batch(np.random.default_rng(0).random((10, 2)))
        assert np.allclose(preds, data.targets.mean())

    def test_penalized_score_recomputed_independently(self):
        data = cell_data(60, seed=5)
        params = bf.HyperParams(scoring="penalized_risk", pro=0.4, penalty=1e-4, candidates=1)
        ctx = ctx_for(data, full_n=200)
        child = bf.build_candidate(unit_cell(), data, params, bf.RandomStream(2), ctx=ctx)
        # Independent re-evaluation: lambda p^2 + (1/n) sum (y - g(x))^2.
        preds = np.array(
            [child.predict_batch(data.features[i : i + 1], bound=data.target_bound)[0]
             for i in range(len(data))]
        )
        risk = float(np.sum((data.targets - preds) ** 2)) / 200
        expected = params.penalty * child.splits_used**2 + risk
        assert child.score == pytest.approx(expected, abs=1e-10)

    def test_score_matches_score_candidate(self):
        data = cell_data(50, seed=8)
        params = bf.HyperParams(candidates=1)
        ctx = ctx_for(data)
        stream = bf.RandomStream(4)
        child = bf.build_child(unit_cell(), data, params, stream, ctx=ctx)
        recomputed = bf.score_candidate(child, data, ctx.full_n, params)
        assert recomputed == pytest.approx(child.score, abs=1e-10)

    def test_zero_split_penalized_score_is_weighted_variance(self):
        data = cell_data(30, seed=9)
        params = bf.HyperParams(scoring="penalized_risk")
        ctx = ctx_for(data, full_n=90)
        child = bf.build_candidate(
            unit_cell(), data, params, bf.RandomStream(0), ctx=ctx, budget=0
        )
        var = float(np.mean((data.targets - data.targets.mean()) ** 2))
        assert child.score == pytest.approx(var * len(data) / 90, rel=1e-12)


class TestBestScored:
    def _stub(self, score, idx):
        tree = one_d_tree([3.0])
        child = manual_child(tree, [0.0, 0.0], [False, False])
        return child.replace(score=score, candidate_index=idx)

    def test_argmin(self):
        cands = [self._stub(s, i) for i, s in enumerate([0.5, 0.3, 0.9])]
        assert bf.best_scored(cands).candidate_index == 1

    def test_single(self):
        assert bf.best_scored([self._stub(0.7, 0)]).candidate_index == 0

    def test_tie_prefers_earlier(self):
        cands = [self._stub(0.3, 0), self._stub(0.3, 1)]
        assert bf.best_scored(cands).candidate_index == 0

    def test_empty_raises(self):
        with pytest.raises(bf.ValidationError):
            bf.best_scored([])


class TestFillVacancies:
    def test_mean_mode(self):
        tree = one_d_tree([3.0])
        child = manual_child(tree, [4.0, 0.0], [False, True])
        data = bf.Dataset(np.array([[1.0], [2.0]]), np.array([1.0, 3.0]))
        filled = bf.fill_vacancies(child, "mean", data)
        assert filled.leaf_values[1] == 2.0
        assert not filled.pending_mask.any()
        assert filled.filled_mask[1] and not filled.filled_mask[0]

    def test_mean_mode_empty_cell_uses_global(self):
        tree = one_d_tree([3.0])
        child = manual_child(tree, [0.0, 0.0], [True, True])
        empty = bf.Dataset(np.empty((0, 1)), np.empty(0))
        filled = bf.fill_vacancies(child, "mean", empty, global_mean=7.5)
        assert np.all(filled.leaf_values == 7.5)

    def test_one_nn_nearest_center(self):
        # Leaves [0,2], [2,3], [3,6] with centers 1, 2.5, 4.5; middle empty.
        tree = one_d_tree([2.0, 3.0])
        child = manual_child(tree, [5.0, 0.0, 9.0], [False, True, False])
        data = bf.Dataset(np.array([[1.0], [5.0]]), np.array([5.0, 9.0]))
        filled = bf.fill_vacancies(child, "one_nn", data)
        assert filled.leaf_values[1] == 5.0

    def test_one_nn_tie_prefers_smaller_id(self):
        # Centers 1, 3, 5: the empty middle leaf is equidistant to both donors.
        tree = one_d_tree([2.0, 4.0])
        child = manual_child(tree, [5.0, 0.0, 9.0], [False, True, False])
        data = bf.Dataset(np.array([[1.0], [5.0]]), np.array([5.0, 9.0]))
        filled = bf.fill_vacancies(child, "one_nn", data)
        assert filled.leaf_values[1] == 5.0

    def test_one_nn_donor_model_evaluated_at_center(self):
        tree = one_d_tree([2.0, 3.0])
        child = manual_child(tree, [0.0, 0.0, 9.0], [False, True, False])
        child.special_models[0] = LinearModel(np.array([2.0]), 1.0)
        data = bf.Dataset(np.array([[1.0]]), np.array([1.0]))
        filled = bf.fill_vacancies(child, "one_nn", data)
        # Donor center is 1.0, so the donated value is 2 * 1 + 1 = 3.
        assert filled.leaf_values[1] == 3.0

    def test_one_nn_requires_donor(self):
        tree = one_d_tree([3.0])
        child = manual_child(tree, [0.0, 0.0], [True, True])
        with pytest.raises(bf.ValidationError):
            bf.fill_vacancies(child, "one_nn", cell_data(2, d=1))

    def test_one_nn_requires_axis_geometry(self):
        data = cell_data(30, seed=2)
        cell = bf.Cell(0, bf.root_box_for(data.features))
        tree = bf.build_stage_two(cell, data, 4, 3, "oblique", bf.RandomStream(0))
        child = manual_child(tree, np.zeros(5), [False, False, False, False, True], cell=cell)
        with pytest.raises(bf.ValidationError):
            bf.fill_vacancies(child, "one_nn", data)

    def test_idempotent_on_filled(self):
        tree = one_d_tree([3.0])
        child = manual_child(tree, [1.0, 2.0], [False, False])
        assert bf.fill_vacancies(child, "mean", cell_data(3, d=1)) is child

    def test_predict_total_after_fill(self):
        data = cell_data(40, seed=6)
        params = bf.HyperParams(candidates=2, pro=1.0)
        child = bf.build_child(unit_cell(), data, params, bf.RandomStream(3), ctx=ctx_for(data))
        pts = np.random.default_rng(1).random((100_000, 2))
        preds = child.predict_batch(pts, bound=data.target_bound)
        assert np.isfinite(preds).all()


class TestBuildChild:
    def test_deterministic_selection(self):
        data = cell_data(80, seed=10)
        params = bf.HyperParams(candidates=3)
        a = bf.build_child(unit_cell(), data, params, bf.RandomStream(6), ctx=ctx_for(data))
        b = bf.build_child(unit_cell(), data, params, bf.RandomStream(6), ctx=ctx_for(data))
        assert a.candidate_index == b.candidate_index
        assert a.score == b.score

    def test_selected_score_is_min(self):
        data = cell_data(80, seed=11)
        params = bf.HyperParams(candidates=4)
        ctx = ctx_for(data)
        stream = bf.RandomStream(7)
        child = bf.build_child(unit_cell(), data, params, stream, ctx=ctx)
        # Rebuild every candidate on the same nested streams.
        perm = stream.child(brng.HOLDOUT).permutation(len(data))
        n_fit = int(round((1.0 - params.holdout_fraction) * len(data)))
        fit_idx, val_idx = perm[:n_fit], perm[n_fit:]
        cap = bf.max_splits(ctx.target_bound, params.penalty)
        budget = bf.split_budget(len(data), params.pro, cap)
        scores = [
            bf.build_candidate(
                unit_cell(), data, params, stream.child(s), ctx=ctx,
                fit_indices=fit_idx, val_indices=val_idx, budget=budget, candidate_index=s,
            ).score
            for s in range(4)
        ]
        assert child.score == min(scores)

    def test_prefix_monotonicity(self):
        data = cell_data(60, seed=12)
        ctx = ctx_for(data)
        for seed in range(10):
            s1 = bf.build_child(
                unit_cell(), data, bf.HyperParams(candidates=1), bf.RandomStream(seed), ctx=ctx
            ).score
            s4 = bf.build_child(
                unit_cell(), data, bf.HyperParams(candidates=4), bf.RandomStream(seed), ctx=ctx
            ).score
            assert s4 <= s1

    def test_small_cell_falls_back_to_penalized(self):
        data = cell_data(3, seed=13)
        params = bf.HyperParams(candidates=2, scoring="holdout")
        child = bf.build_child(unit_cell(), data, params, bf.RandomStream(8), ctx=ctx_for(data))
        assert child.holdout_indices is None


class TestParent:
    def test_m1_single_child(self):
        data = cell_data(50, seed=14)
        params = bf.HyperParams(trees=1, cells=1, candidates=2)
        parent = bf.build_parent(data, params, 0, bf.RandomStream(9))
        assert len(parent.children) == 1
        x = data.features[:5]
        assert np.array_equal(
            parent.predict_batch(x, bound=data.target_bound),
            parent.children[0].predict_batch(x, bound=data.target_bound),
        )

    def test_predictions_bounded(self):
        data = cell_data(120, seed=15)
        params = bf.HyperParams(cells=4, candidates=2)
        parent = bf.build_parent(data, params, 0, bf.RandomStream(10))
        preds = parent.predict_batch(data.features, bound=data.target_bound)
        assert np.isfinite(preds).all()
        assert (np.abs(preds) <= data.target_bound).all()

    def test_zero_extension_equals_containing_child(self):
        data = cell_data(150, seed=16)
        params = bf.HyperParams(cells=3, candidates=2)
        parent = bf.build_parent(data, params, 0, bf.RandomStream(11))
        pts = np.random.default_rng(2).random((200, 2))
        cell_ids = parent.stage_one.locate_batch(pts)
        whole = parent.predict_batch(pts, bound=data.target_bound)
        for j, child in enumerate(parent.children):
            mask = cell_ids == j
            if mask.any():
                part = child.predict_batch(pts[mask], bound=data.target_bound)
                assert np.array_equal(whole[mask], part)

    def test_staircase_lookup(self):
        # Hand-built parent: cells [0,3) and [3,6), one split each at 1.5
        # and 4.5; constant leaves fit by hand-enumerable means.
        xs = np.array([0.5, 1.0, 2.0, 2.5, 3.5, 4.0, 5.0, 5.5])
        ys = np.array([1.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0])
        stage_one = one_d_tree([3.0])
        parts = [
            bf.apply_axis_split(
                bf.build_stage_two(
                    stage_one.leaf_cell(0),
                    bf.Dataset(np.empty((0, 1)), np.empty(0)),
                    0, 1, "axis_parallel", bf.RandomStream(0), pure=True,
                ),
                bf.AxisSplit(0, 0, 0.5),
            ),
            bf.apply_axis_split(
                bf.build_stage_two(
                    stage_one.leaf_cell(1),
                    bf.Dataset(np.empty((0, 1)), np.empty(0)),
                    0, 1, "axis_parallel", bf.RandomStream(0), pure=True,
                ),
                bf.AxisSplit(0, 0, 0.5),
            ),
        ]
        children = []
        for j, part in enumerate(parts):
            in_cell = (xs >= 3.0 * j) & (xs < 3.0 * (j + 1))
            leaf_of = part.locate_batch(xs[in_cell][:, None])
            values = np.array(
                [ys[in_cell][leaf_of == leaf].mean() for leaf in range(2)]
            )
            child = ChildTree(
                cell=stage_one.leaf_cell(j),
                partition=part,
                leaf_values=values,
                special_models={},
                pending_mask=np.zeros(2, dtype=bool),
                filled_mask=np.zeros(2, dtype=bool),
                splits_used=1,
                score=0.0,
                candidate_index=0,
            )
            children.append(child)
        parent = bf.ParentTree(stage_one, tuple(children))
        # Hand lookup: [0,1.5) -> 2, [1.5,3) -> 6, [3,4.5) -> 12, [4.5,6) -> 18.
        expected = {0.2: 2.0, 1.4: 2.0, 1.6: 6.0, 2.9: 6.0, 3.1: 12.0, 4.4: 12.0, 4.6: 18.0, 5.9: 18.0}
        for x, want in expected.items():
            assert bf.predict_parent(parent, [x]) == want

    def test_aggregate_split_count(self):
        data = cell_data(100, seed=17)
        params = bf.HyperParams(cells=3, candidates=1, penalty=0.25)
        parent = bf.build_parent(data, params, 0, bf.RandomStream(12))
        total = sum(
            params.penalty_for_cell(c.cell_id) * c.splits_used**2 for c in parent.children
        )
        assert parent.aggregate_split_count(params) == pytest.approx(np.sqrt(total))

    def test_constant_mode_zero_splits_predicts_cell_mean(self):
        data = cell_data(40, seed=18)
        params = bf.HyperParams(cells=2, candidates=1, pro=0.01)
        parent = bf.build_parent(data, params, 0, bf.RandomStream(13))
        cell_ids = parent.stage_one.locate_batch(data.features)
        for j, child in enumerate(parent.children):
            if child.splits_used == 0 and (cell_ids == j).any() and child.holdout_indices is None:
                want = data.targets[cell_ids == j].mean()
                got = bf.predict_parent(parent, data.features[cell_ids == j][0])
                assert got == pytest.approx(want)
