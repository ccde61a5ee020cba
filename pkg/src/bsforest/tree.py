"""Child and parent trees: candidate growth, best-scored selection, vacancy fill.

A child tree partitions one stage-one cell and carries one value model
per leaf.  ``build_child`` grows k candidates on nested per-candidate
streams, scores each (validation MSE by default, penalized empirical risk
otherwise), and keeps the argmin.  A parent tree is the disjoint-support
sum of the child trees over all cells: exactly one child contributes to
any prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .core import (
    Dataset,
    HyperParams,
    ValidationError,
    max_splits,
    mse,
    penalized_score,
)
from .leafmodel import (
    ConstantModel,
    ModelSearchSpec,
    fit_leaf,
    predict_leaf,
    predict_leaf_batch,
)
from .partition import (
    Cell,
    PartitionTree,
    _trivial_tree,
    build_stage_two_with_ids,
    split_budget,
)
from .rng import RandomStream


@dataclass(frozen=True)
class TrainContext:
    """Training-wide constants shared by every cell build."""

    full_n: int
    target_bound: float
    global_mean: float


class ChildTree:
    """Stage-two partition of one cell plus one value model per leaf.

    Constant leaf values (including vacancy fills) live in ``leaf_values``;
    linear/kernel leaves live in ``special_models``.  ``pending_mask``
    marks empty leaves that still await vacancy filling.
    """

    __slots__ = (
        "cell",
        "partition",
        "splits_used",
        "score",
        "candidate_index",
        "holdout_indices",
        "leaf_values",
        "special_models",
        "pending_mask",
        "filled_mask",
    )

    def __init__(
        self,
        cell: Cell,
        partition: PartitionTree,
        leaf_values: np.ndarray,
        special_models: dict,
        pending_mask: np.ndarray,
        filled_mask: np.ndarray,
        splits_used: int,
        score: float,
        candidate_index: int,
        holdout_indices=None,
    ):
        self.cell = cell
        self.partition = partition
        self.leaf_values = leaf_values
        self.special_models = special_models
        self.pending_mask = pending_mask
        self.filled_mask = filled_mask
        self.splits_used = splits_used
        self.score = score
        self.candidate_index = candidate_index
        self.holdout_indices = holdout_indices

    @property
    def cell_id(self) -> int:
        return self.cell.id

    @property
    def leaf_models(self) -> tuple:
        """One model per leaf (None while a leaf is pending vacancy fill)."""
        out = []
        for i in range(self.partition.n_leaves):
            if i in self.special_models:
                out.append(self.special_models[i])
            elif self.pending_mask[i]:
                out.append(None)
            else:
                out.append(ConstantModel(float(self.leaf_values[i])))
        return tuple(out)

    def predict_batch(self, X, bound: float | None = None) -> np.ndarray:
        if self.pending_mask.any():
            raise ValidationError("child tree has unfilled empty leaves")
        leaf_ids = self.partition.locate_batch(X)
        out = self.leaf_values[leaf_ids]
        for leaf, model in self.special_models.items():
            mask = leaf_ids == leaf
            if mask.any():
                out[mask] = predict_leaf_batch(model, X[mask])
        if bound is not None:
            np.clip(out, -bound, bound, out=out)
        return out

    def replace(self, **updates) -> "ChildTree":
        kwargs = dict(
            cell=self.cell,
            partition=self.partition,
            leaf_values=self.leaf_values,
            special_models=self.special_models,
            pending_mask=self.pending_mask,
            filled_mask=self.filled_mask,
            splits_used=self.splits_used,
            score=self.score,
            candidate_index=self.candidate_index,
            holdout_indices=self.holdout_indices,
        )
        kwargs.update(updates)
        return ChildTree(**kwargs)


@dataclass(frozen=True)
class ParentTree:
    """Stage-one partition into m cells plus one child tree per cell."""

    stage_one: PartitionTree
    children: tuple

    def predict_batch(self, X, bound: float | None = None) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        cell_ids = self.stage_one.locate_batch(X)
        out = np.empty(X.shape[0], dtype=np.float64)
        for j, child in enumerate(self.children):
            mask = cell_ids == j
            if mask.any():
                out[mask] = child.predict_batch(X[mask], bound=bound)
        return out

    def aggregate_split_count(self, params: HyperParams) -> float:
        """sqrt(sum_j lambda_j * p_j^2), the direct-sum split count."""
        total = 0.0
        for child in self.children:
            lam = params.penalty_for_cell(child.cell_id)
            total += lam * child.splits_used * child.splits_used
        return float(np.sqrt(total))


def _context_for(cell_data: Dataset, ctx: TrainContext | None) -> TrainContext:
    if ctx is not None:
        return ctx
    mean = float(cell_data.targets.mean()) if len(cell_data) else 0.0
    return TrainContext(
        full_n=max(len(cell_data), 1),
        target_bound=cell_data.target_bound,
        global_mean=mean,
    )


def build_candidate(
    cell: Cell,
    cell_data: Dataset,
    params: HyperParams,
    stream: RandomStream,
    *,
    ctx: TrainContext | None = None,
    fit_indices=None,
    val_indices=None,
    budget: int | None = None,
    candidate_index: int = 0,
) -> ChildTree:
    """Grow and fit one candidate child tree on a cell, fill it, score it.

    ``val_indices`` selects holdout scoring (fit on the complement);
    otherwise the candidate is fit on everything and scored by the
    penalized empirical risk over the full training size ``ctx.full_n``.
    An empty cell yields a 0-split child predicting the global mean.
    """
    ctx = _context_for(cell_data, ctx)
    lam = params.penalty_for_cell(cell.id)
    n_cell = len(cell_data)

    if n_cell == 0:
        tree = _trivial_tree(cell.bounding_box, params.geometry)
        return ChildTree(
            cell=cell,
            partition=tree,
            leaf_values=np.array([ctx.global_mean]),
            special_models={},
            pending_mask=np.zeros(1, dtype=bool),
            filled_mask=np.ones(1, dtype=bool),
            splits_used=0,
            score=penalized_score(0.0, 0, lam),
            candidate_index=candidate_index,
        )

    if budget is None:
        cap = max_splits(ctx.target_bound, lam)
        budget = split_budget(n_cell, params.pro, cap)

    if fit_indices is None:
        fit_data = cell_data
    else:
        fit_data = cell_data.subset(fit_indices)

    tree, leaf_ids = build_stage_two_with_ids(
        cell, fit_data, budget, params.votes, params.geometry, stream, pure=params.pure
    )
    n_leaves = tree.n_leaves
    counts = np.bincount(leaf_ids, minlength=n_leaves)
    pending = counts == 0

    special: dict[int, object] = {}
    if params.leaf_model == "constant":
        sums = np.bincount(leaf_ids, weights=fit_data.targets, minlength=n_leaves)
        values = np.divide(
            sums, counts, out=np.zeros(n_leaves, dtype=np.float64), where=counts > 0
        )
    else:
        values = np.zeros(n_leaves, dtype=np.float64)
        search = ModelSearchSpec(params.c_grid, params.gamma_grid)
        min_leaf = params.effective_min_leaf()
        order = np.argsort(leaf_ids, kind="stable")
        bounds = np.searchsorted(leaf_ids[order], np.arange(n_leaves + 1))
        for leaf in range(n_leaves):
            members = order[bounds[leaf] : bounds[leaf + 1]]
            if members.size == 0:
                continue
            model = fit_leaf(
                fit_data.subset(members),
                params.leaf_model,
                search,
                stream.child(rng.LEAF_FIT, leaf),
                min_leaf,
            )
            if isinstance(model, ConstantModel):
                values[leaf] = model.value
            else:
                special[leaf] = model

    child = ChildTree(
        cell=cell,
        partition=tree,
        leaf_values=values,
        special_models=special,
        pending_mask=pending,
        filled_mask=np.zeros(n_leaves, dtype=bool),
        splits_used=budget,
        score=float("nan"),
        candidate_index=candidate_index,
        holdout_indices=None if val_indices is None else np.asarray(val_indices),
    )
    child = fill_vacancies(
        child,
        params.vacancy_fill,
        cell_data,
        global_mean=ctx.global_mean,
        bound=ctx.target_bound,
    )
    score = score_candidate(child, cell_data, ctx.full_n, params, bound=ctx.target_bound)
    return child.replace(score=score)


def score_candidate(
    child: ChildTree,
    cell_data: Dataset,
    full_n: int,
    params: HyperParams,
    *,
    bound: float | None = None,
) -> float:
    """Recompute a child's selection score from its stored data.

    Children built with a holdout return the validation MSE on the stored
    holdout rows; others return lambda * p^2 plus the empirical risk of
    the child over the full training size.
    """
    if bound is None:
        bound = cell_data.target_bound
    if child.holdout_indices is not None:
        val = cell_data.subset(child.holdout_indices)
        return mse(child.predict_batch(val.features, bound=bound), val.targets)
    lam = params.penalty_for_cell(child.cell_id)
    if len(cell_data) == 0:
        return penalized_score(0.0, child.splits_used, lam)
    preds = child.predict_batch(cell_data.features, bound=bound)
    risk = float(np.sum((cell_data.targets - preds) ** 2)) / full_n
    return penalized_score(risk, child.splits_used, lam)


def best_scored(candidates) -> ChildTree:
    """Argmin score; ties keep the earliest candidate index."""
    if not candidates:
        raise ValidationError("best_scored requires at least one candidate")
    best = candidates[0]
    for cand in candidates[1:]:
        if cand.score < best.score:
            best = cand
    return best


def fill_vacancies(
    child: ChildTree,
    mode: str,
    cell_data: Dataset,
    *,
    global_mean: float = 0.0,
    bound: float | None = None,
) -> ChildTree:
    """Assign constant values to empty leaves; idempotent on filled trees.

    ``mean``: every empty leaf takes the mean target of all samples in
    the stage-one cell (the global mean when the cell is empty).
    ``one_nn``: each empty leaf copies the nearest non-empty leaf's model
    evaluated at that donor's own center; axis-parallel only, ties to the
    smaller donor id.
    """
    if not child.pending_mask.any():
        return child
    values = child.leaf_values.copy()
    pending = child.pending_mask
    filled = child.filled_mask.copy()
    if mode == "mean":
        fill_value = float(cell_data.targets.mean()) if len(cell_data) else global_mean
        values[pending] = fill_value
    elif mode == "one_nn":
        if child.partition.geometry != "axis_parallel":
            raise ValidationError("one_nn vacancy fill requires axis_parallel geometry")
        donor_ids = np.nonzero(~pending)[0]
        if donor_ids.size == 0:
            raise ValidationError("one_nn vacancy fill requires a non-empty leaf")
        centers = child.partition.leaf_centers()
        donor_values = np.empty(donor_ids.size)
        for i, leaf in enumerate(donor_ids):
            model = child.special_models.get(int(leaf))
            if model is None:
                donor_values[i] = values[leaf]
            else:
                donor_values[i] = predict_leaf(model, centers[leaf], bound=bound)
        for leaf in np.nonzero(pending)[0]:
            deltas = centers[donor_ids] - centers[leaf]
            dist = np.sqrt(np.sum(deltas * deltas, axis=1))
            values[leaf] = donor_values[int(np.argmin(dist))]
    else:
        raise ValidationError(f"unknown vacancy fill mode {mode!r}")
    filled[pending] = True
    return child.replace(
        leaf_values=values,
        pending_mask=np.zeros_like(pending),
        filled_mask=filled,
    )


def build_child(
    cell: Cell,
    cell_data: Dataset,
    params: HyperParams,
    stream: RandomStream,
    *,
    ctx: TrainContext | None = None,
) -> ChildTree:
    """Best-scored child tree: k candidates on nested streams, keep the argmin.

    Holdout scoring withholds one fixed 30% split of the cell before any
    candidate is fit, so the comparison is paired; cells with fewer than
    4 samples fall back to penalized-risk scoring.
    """
    ctx = _context_for(cell_data, ctx)
    n_cell = len(cell_data)
    lam = params.penalty_for_cell(cell.id)
    cap = max_splits(ctx.target_bound, lam)
    budget = split_budget(n_cell, params.pro, cap)

    fit_idx = val_idx = None
    if params.scoring == "holdout" and n_cell >= 4:
        perm = stream.child(rng.HOLDOUT).permutation(n_cell)
        n_fit = int(round((1.0 - params.holdout_fraction) * n_cell))
        if 0 < n_fit < n_cell:
            fit_idx, val_idx = perm[:n_fit], perm[n_fit:]

    candidates = [
        build_candidate(
            cell,
            cell_data,
            params,
            stream.child(s),
            ctx=ctx,
            fit_indices=fit_idx,
            val_indices=val_idx,
            budget=budget,
            candidate_index=s,
        )
        for s in range(params.candidates)
    ]
    return best_scored(candidates)


def build_parent(
    data: Dataset,
    params: HyperParams,
    tree_index: int,
    stream: RandomStream,
    *,
    ctx: TrainContext | None = None,
    root_box=None,
) -> ParentTree:
    """One parent tree: adaptive stage-one partition plus a child per cell."""
    from .partition import build_stage_one, root_box_for

    if len(data) == 0:
        raise ValidationError("build_parent requires a non-empty dataset")
    if ctx is None:
        ctx = TrainContext(
            full_n=len(data),
            target_bound=data.target_bound,
            global_mean=float(data.targets.mean()),
        )
    if root_box is None:
        root_box = root_box_for(data.features)
    stage_one = build_stage_one(
        data, params.cells, params.votes, params.geometry, stream, root_box=root_box
    )
    cell_ids = stage_one.locate_batch(data.features)
    children = []
    for j in range(params.cells):
        cell = stage_one.leaf_cell(j)
        cell_rows = np.nonzero(cell_ids == j)[0]
        children.append(
            build_child(cell, data.subset(cell_rows), params, stream.child(j), ctx=ctx)
        )
    return ParentTree(stage_one, tuple(children))


def predict_parent(tree: ParentTree, x, bound: float | None = None) -> float:
    """Evaluate the parent at one point: its containing child's value."""
    x = np.asarray(x, dtype=np.float64)
    return float(tree.predict_batch(x[None, :], bound=bound)[0])
