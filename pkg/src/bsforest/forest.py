"""Ensemble orchestration: train T parent trees, average, persist.

Randomness is fully pre-keyed by (master_seed, tree, cell, candidate,
purpose), so training with 1 or many workers produces bit-identical
forests, and therefore bit-identical model files.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from .core import Dataset, HyperParams, ModelFormatError, ValidationError
from .leafmodel import KernelModel, LinearModel
from .partition import AxisBox, PartitionTree, root_box_for
from .rng import RandomStream
from .serialize import (
    FORMAT_VERSION,
    decode_array,
    encode_array,
    fhex,
    funhex,
    read_model,
    write_model,
)
from .partition import build_stage_two_with_ids
from .tree import ChildTree, ParentTree, TrainContext, build_child
from . import partition as _partition

WORKERS_ENV = "BSFOREST_WORKERS"


@dataclass(frozen=True)
class TrainingMeta:
    """Facts about the training run every parent shares."""

    n: int
    dim: int
    target_bound: float
    global_mean: float
    root_lower: np.ndarray
    root_upper: np.ndarray


@dataclass(frozen=True)
class Forest:
    """T parent trees plus the configuration that produced them."""

    parents: tuple
    params: HyperParams
    meta: TrainingMeta
    format_version: int = FORMAT_VERSION

    def predict(self, x) -> float:
        return predict(self, x)

    def predict_batch(self, xs, workers: int | None = None) -> np.ndarray:
        return predict_batch(self, xs, workers=workers)

    def save(self, path) -> None:
        save(self, path)


def resolve_workers(requested: int | None) -> int:
    """Worker count: the BSFOREST_WORKERS env var overrides the argument."""
    env = os.environ.get(WORKERS_ENV)
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    if requested is None:
        return os.cpu_count() or 1
    return max(1, int(requested))


_warmed = False


def _warm_kernels(dim: int) -> None:
    """Trigger jit compilation once, before any thread pool spins up."""
    global _warmed
    if _warmed:
        return
    tiny = Dataset(np.array([[0.0] * dim, [1.0] * dim]), np.array([0.0, 1.0]))
    box = AxisBox(np.full(dim, -0.5), np.full(dim, 1.5))
    cell = _partition.Cell(0, box)
    for geometry in ("axis_parallel", "oblique"):
        tree, _ = build_stage_two_with_ids(
            cell, tiny, 1, 1, geometry, RandomStream(0), pure=False
        )
        tree.locate_batch(tiny.features)
        PartitionTree.from_payload(tree.to_payload())
    _warmed = True


def train(data: Dataset, params: HyperParams, workers: int | None = None) -> Forest:
    """Train T parents on independent stage-one partitions, concurrently.

    Tree t draws from stream path (t); cell j of tree t from (t, j); all
    streams are derived before work is scheduled, so the result does not
    depend on the worker count.
    """
    params.validate()
    if len(data) == 0:
        raise ValidationError("training requires a non-empty dataset")

    master = RandomStream(params.master_seed)
    root_box = root_box_for(data.features)
    ctx = TrainContext(
        full_n=len(data),
        target_bound=data.target_bound,
        global_mean=float(data.targets.mean()),
    )
    meta = TrainingMeta(
        n=len(data),
        dim=data.dim,
        target_bound=data.target_bound,
        global_mean=ctx.global_mean,
        root_lower=root_box.lower,
        root_upper=root_box.upper,
    )
    _warm_kernels(data.dim)
    n_workers = resolve_workers(workers)

    def make_stage_one(t: int) -> PartitionTree:
        return _partition.build_stage_one(
            data, params.cells, params.votes, params.geometry, master.child(t), root_box=root_box
        )

    def make_child(args):
        t, j, cell, rows = args
        return build_child(
            cell, data.subset(rows), params, master.child(t).child(j), ctx=ctx
        )

    T = params.trees
    if n_workers <= 1:
        stage_ones = [make_stage_one(t) for t in range(T)]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            stage_ones = list(pool.map(make_stage_one, range(T)))

    tasks = []
    for t, stage_one in enumerate(stage_ones):
        cell_ids = stage_one.locate_batch(data.features)
        for j in range(params.cells):
            rows = np.nonzero(cell_ids == j)[0]
            tasks.append((t, j, stage_one.leaf_cell(j), rows))

    if n_workers <= 1:
        results = [make_child(task) for task in tasks]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(make_child, tasks))

    parents = []
    for t in range(T):
        children = tuple(results[t * params.cells : (t + 1) * params.cells])
        parents.append(ParentTree(stage_ones[t], children))
    return Forest(tuple(parents), params, meta)


def _as_matrix(xs, dim: int) -> np.ndarray:
    if isinstance(xs, np.ndarray):
        if xs.ndim != 2:
            raise ValidationError("expected a 2-d array of query points")
        if xs.shape[1] != dim and xs.shape[0] > 0:
            raise ValidationError(f"query points have {xs.shape[1]} features, model expects {dim}")
        return np.ascontiguousarray(xs, dtype=np.float64)
    rows = list(xs)
    out = np.empty((len(rows), dim), dtype=np.float64)
    for i, row in enumerate(rows):
        row = np.asarray(row, dtype=np.float64).ravel()
        if row.shape[0] != dim:
            raise ValidationError(
                f"input {i}: expected {dim} features, found {row.shape[0]}"
            )
        out[i] = row
    return out


def predict(forest: Forest, x) -> float:
    """Average of the T parent predictions at one point."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != forest.meta.dim:
        raise ValidationError(
            f"query point has {x.shape[0]} features, model expects {forest.meta.dim}"
        )
    return float(predict_batch(forest, x[None, :])[0])


def per_parent_predictions(forest: Forest, xs, workers: int | None = None) -> np.ndarray:
    """(T, n) matrix of every parent's predictions, in tree order."""
    X = _as_matrix(xs, forest.meta.dim)
    bound = forest.meta.target_bound
    n_workers = resolve_workers(workers) if workers is not None else 1
    if X.shape[0] == 0:
        return np.empty((len(forest.parents), 0))
    if n_workers <= 1:
        rows = [parent.predict_batch(X, bound=bound) for parent in forest.parents]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(lambda p: p.predict_batch(X, bound=bound), forest.parents))
    return np.vstack(rows)


def predict_batch(forest: Forest, xs, workers: int | None = None) -> np.ndarray:
    """Element-wise forest prediction; order preserved, deterministic."""
    X = _as_matrix(xs, forest.meta.dim)
    if X.shape[0] == 0:
        return np.empty(0)
    rows = per_parent_predictions(forest, X, workers=workers)
    out = rows[0].copy()
    for row in rows[1:]:
        out += row
    out /= len(forest.parents)
    return out


# -- persistence --------------------------------------------------------------


def _params_payload(params: HyperParams) -> dict:
    out = {}
    for f in fields(HyperParams):
        v = getattr(params, f.name)
        if isinstance(v, float):
            out[f.name] = fhex(v)
        elif isinstance(v, tuple):
            out[f.name] = [fhex(float(x)) for x in v]
        else:
            out[f.name] = v
    return out


def _params_from_payload(obj: dict) -> HyperParams:
    kwargs = {}
    for f in fields(HyperParams):
        if f.name not in obj:
            raise ModelFormatError(f"model params missing field {f.name!r}")
        v = obj[f.name]
        if f.name in ("pro", "penalty", "holdout_fraction"):
            v = funhex(v)
        elif f.name in ("c_grid", "gamma_grid"):
            v = tuple(funhex(x) for x in v)
        elif f.name == "penalty_per_cell" and v is not None:
            v = tuple(funhex(x) for x in v)
        kwargs[f.name] = v
    return HyperParams(**kwargs)


def _child_payload(child: ChildTree) -> dict:
    if child.pending_mask.any():
        raise ValidationError("cannot serialize a child with unfilled leaves")
    special = []
    for leaf in sorted(child.special_models):
        model = child.special_models[leaf]
        if isinstance(model, LinearModel):
            special.append(
                {
                    "leaf": int(leaf),
                    "kind": "linear",
                    "weights": encode_array(model.weights),
                    "bias": fhex(model.bias),
                }
            )
        elif isinstance(model, KernelModel):
            special.append(
                {
                    "leaf": int(leaf),
                    "kind": "kernel",
                    "support": encode_array(model.support_points),
                    "coeff": encode_array(model.coefficients),
                    "bias": fhex(model.bias),
                    "gamma": fhex(model.gamma),
                }
            )
        else:
            raise ValidationError(f"unexpected special model {type(model).__name__}")
    return {
        "cell_id": int(child.cell_id),
        "p": int(child.splits_used),
        "score": fhex(child.score),
        "candidate_index": int(child.candidate_index),
        "partition": _partition_payload(child.partition),
        "leaf_values": encode_array(child.leaf_values),
        "filled": encode_array(child.filled_mask.astype(np.uint8)),
        "special": special,
    }


def _partition_payload(tree: PartitionTree) -> dict:
    raw = tree.to_payload()
    out = {"geometry": raw["geometry"]}
    for key, value in raw.items():
        if key == "geometry":
            continue
        out[key] = encode_array(value)
    return out


def _partition_from_payload(obj: dict) -> PartitionTree:
    try:
        geometry = obj["geometry"]
        decoded = {"geometry": geometry}
        for key, value in obj.items():
            if key == "geometry":
                continue
            decoded[key] = decode_array(value)
        return PartitionTree.from_payload(decoded)
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"corrupt partition payload: {exc}") from None


def _child_from_payload(obj: dict, stage_one: PartitionTree) -> ChildTree:
    try:
        cell_id = int(obj["cell_id"])
        part = _partition_from_payload(obj["partition"])
        leaf_values = decode_array(obj["leaf_values"])
        filled = decode_array(obj["filled"]).astype(bool)
        special = {}
        for item in obj["special"]:
            leaf = int(item["leaf"])
            if item["kind"] == "linear":
                special[leaf] = LinearModel(
                    decode_array(item["weights"]), funhex(item["bias"])
                )
            elif item["kind"] == "kernel":
                special[leaf] = KernelModel(
                    decode_array(item["support"]),
                    decode_array(item["coeff"]),
                    funhex(item["bias"]),
                    funhex(item["gamma"]),
                )
            else:
                raise ModelFormatError(f"unknown leaf model kind {item['kind']!r}")
        return ChildTree(
            cell=stage_one.leaf_cell(cell_id),
            partition=part,
            leaf_values=leaf_values,
            special_models=special,
            pending_mask=np.zeros(part.n_leaves, dtype=bool),
            filled_mask=filled,
            splits_used=int(obj["p"]),
            score=funhex(obj["score"]),
            candidate_index=int(obj["candidate_index"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"corrupt child payload: {exc}") from None


def save(forest: Forest, path) -> None:
    """Write the forest to a versioned, checksummed, lossless container."""
    payload = {
        "params": _params_payload(forest.params),
        "meta": {
            "n": forest.meta.n,
            "dim": forest.meta.dim,
            "target_bound": fhex(forest.meta.target_bound),
            "global_mean": fhex(forest.meta.global_mean),
            "root_lower": encode_array(forest.meta.root_lower),
            "root_upper": encode_array(forest.meta.root_upper),
        },
        "parents": [
            {
                "stage_one": _partition_payload(parent.stage_one),
                "children": [_child_payload(child) for child in parent.children],
            }
            for parent in forest.parents
        ],
    }
    write_model(path, payload)


def load(path) -> Forest:
    """Read a model written by save(); predictions are bit-identical."""
    payload = read_model(path)
    try:
        params = _params_from_payload(payload["params"])
        meta_obj = payload["meta"]
        meta = TrainingMeta(
            n=int(meta_obj["n"]),
            dim=int(meta_obj["dim"]),
            target_bound=funhex(meta_obj["target_bound"]),
            global_mean=funhex(meta_obj["global_mean"]),
            root_lower=decode_array(meta_obj["root_lower"]),
            root_upper=decode_array(meta_obj["root_upper"]),
        )
        parents = []
        for pobj in payload["parents"]:
            stage_one = _partition_from_payload(pobj["stage_one"])
            children = tuple(
                _child_from_payload(cobj, stage_one) for cobj in pobj["children"]
            )
            parents.append(ParentTree(stage_one, children))
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: corrupt model payload: {exc}") from None
    if len(parents) != params.trees:
        raise ModelFormatError(f"{path}: parent count does not match params.trees")
    return Forest(tuple(parents), params, meta)
