"""Random feature-space partitioning.

Two kinds of split machinery: axis-parallel cuts (leaf, dimension, ratio)
and oblique halfspace cuts (leaf, normal, offset through a data centroid),
plus the stage-one builder (adaptive cell partition of the whole space)
and the stage-two builder (per-cell partition, adaptive or pure).

Leaf id convention: the lower/left child of a split keeps the split
leaf's id, the new upper/right child takes the next free id, so ids are
stable and after p splits the leaves are exactly 0..p.  Points on a cut
boundary always belong to the lower/left side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels, rng
from .core import BsforestError, Dataset, ValidationError
from .rng import RandomStream

ROOT_MARGIN = 0.05
OBLIQUE_RETRIES = 16


class HyperplaneMissError(BsforestError):
    """An oblique hyperplane does not cross the target leaf's bounding box.

    Callers building partitions resample the normal (up to a retry cap)
    and then fall back to an axis-parallel cut.
    """


@dataclass(frozen=True)
class AxisBox:
    """Axis-parallel box {x : lower <= x <= upper}, lower < upper per dim."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.ascontiguousarray(self.lower, dtype=np.float64)
        hi = np.ascontiguousarray(self.upper, dtype=np.float64)
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise ValidationError("box bounds must be 1-d vectors of equal length")
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise ValidationError("box bounds must be finite")
        if not (lo < hi).all():
            raise ValidationError("box requires lower < upper in every dimension")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return (self.lower + self.upper) / 2.0

    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def l1_diameter(self) -> float:
        return float(np.sum(self.upper - self.lower))

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool((x >= self.lower).all() and (x <= self.upper).all())


@dataclass(frozen=True)
class Halfspace:
    """{x : normal . x + offset <= 0}."""

    normal: np.ndarray
    offset: float


@dataclass(frozen=True)
class Polytope:
    """Halfspace intersection within a bounding box."""

    halfspaces: tuple
    bounding_box: AxisBox

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=np.float64)
        if not self.bounding_box.contains(x):
            return False
        for hs in self.halfspaces:
            if float(hs.normal @ x) + hs.offset > 0.0:
                return False
        return True


@dataclass(frozen=True)
class Cell:
    """A convex region of feature space with a stable integer id."""

    id: int
    geometry: "AxisBox | Polytope"

    @property
    def bounding_box(self) -> AxisBox:
        if isinstance(self.geometry, AxisBox):
            return self.geometry
        return self.geometry.bounding_box

    def contains(self, x) -> bool:
        return self.geometry.contains(x)


@dataclass(frozen=True)
class AxisSplit:
    """Cut leaf ``leaf_id`` in dimension ``dim`` at ratio of its extent."""

    leaf_id: int
    dim: int
    ratio: float


@dataclass(frozen=True)
class ObliqueSplit:
    """Cut leaf ``leaf_id`` by the hyperplane normal . x + offset = 0."""

    leaf_id: int
    normal: np.ndarray
    offset: float


def _crosses_box(w, b, lo, hi) -> bool:
    """True when the hyperplane w.x + b = 0 strictly crosses the box."""
    lo_val = b + float(np.minimum(w * lo, w * hi).sum())
    hi_val = b + float(np.maximum(w * lo, w * hi).sum())
    return lo_val < 0.0 < hi_val


def _clip_box_halfspace(lo, hi, w, b):
    """Bounding box of {x in [lo, hi] : w.x + b <= 0} (exact per halfspace)."""
    contrib_min = np.minimum(w * lo, w * hi)
    total_min = b + float(contrib_min.sum())
    new_lo = lo.copy()
    new_hi = hi.copy()
    for k in range(len(w)):
        wk = w[k]
        if wk == 0.0:
            continue
        rest = total_min - contrib_min[k]
        bound = -rest / wk
        if wk > 0.0:
            if bound < new_hi[k]:
                new_hi[k] = bound
        else:
            if bound > new_lo[k]:
                new_lo[k] = bound
        if not new_lo[k] < new_hi[k]:
            # Degenerate from rounding at a touching plane: keep the parent extent.
            new_lo[k] = lo[k]
            new_hi[k] = hi[k]
    return new_lo, new_hi


class PartitionTree:
    """A sequence of splits of a root box, with point location and leaf cells.

    Immutable once constructed; the split ops return new trees.
    """

    __slots__ = (
        "geometry",
        "dim",
        "root_lower",
        "root_upper",
        "split_leaf",
        "split_dim",
        "split_ratio",
        "split_cut",
        "split_normal",
        "split_offset",
        "node_split",
        "node_left",
        "node_right",
        "node_parent",
        "node_side",
        "node_leaf",
        "leaf_lower",
        "leaf_upper",
        "leaf_node",
    )

    def __init__(self, geometry, root_lower, root_upper, arrays):
        self.geometry = geometry
        self.root_lower = root_lower
        self.root_upper = root_upper
        self.dim = int(root_lower.shape[0])
        for name, value in arrays.items():
            setattr(self, name, value)

    @property
    def n_splits(self) -> int:
        return int(self.split_leaf.shape[0])

    @property
    def n_leaves(self) -> int:
        return self.n_splits + 1

    @property
    def root_cell(self) -> Cell:
        return Cell(0, AxisBox(self.root_lower.copy(), self.root_upper.copy()))

    # -- location ---------------------------------------------------------

    def locate_batch(self, X) -> np.ndarray:
        """Leaf id for each row of X; points outside the root clamp to it."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ValidationError(f"query points must have shape (n, {self.dim})")
        X = np.clip(X, self.root_lower, self.root_upper)
        if self.geometry == "axis_parallel":
            return _kernels.locate_axis(
                self.node_split,
                self.node_left,
                self.node_right,
                self.node_leaf,
                self.split_dim,
                self.split_cut,
                X,
            )
        return _kernels.locate_oblique(
            self.node_split,
            self.node_left,
            self.node_right,
            self.node_leaf,
            self.split_normal,
            self.split_offset,
            X,
        )

    def locate(self, x) -> int:
        x = np.asarray(x, dtype=np.float64)
        return int(self.locate_batch(x[None, :])[0])

    # -- leaf geometry ----------------------------------------------------

    def leaf_cell(self, leaf_id: int) -> Cell:
        if not 0 <= leaf_id < self.n_leaves:
            raise ValidationError(f"leaf id {leaf_id} out of range")
        box = AxisBox(self.leaf_lower[leaf_id].copy(), self.leaf_upper[leaf_id].copy())
        if self.geometry == "axis_parallel":
            return Cell(leaf_id, box)
        return Cell(leaf_id, Polytope(tuple(self.leaf_halfspaces(leaf_id)), box))

    @property
    def leaves(self) -> list:
        return [self.leaf_cell(i) for i in range(self.n_leaves)]

    def leaf_halfspaces(self, leaf_id: int) -> list:
        """Halfspace chain from the root to the leaf (root-most first)."""
        chain = []
        node = int(self.leaf_node[leaf_id])
        while True:
            parent = int(self.node_parent[node])
            if parent < 0:
                break
            s = int(self.node_split[parent])
            if self.geometry == "axis_parallel":
                w = np.zeros(self.dim)
                w[self.split_dim[s]] = 1.0
                b = -float(self.split_cut[s])
            else:
                w = self.split_normal[s].copy()
                b = float(self.split_offset[s])
            if self.node_side[node] == 1:  # upper side: w.x + b > 0, i.e. -w.x - b <= 0
                w, b = -w, -b
            chain.append(Halfspace(w, b))
            node = parent
        chain.reverse()
        return chain

    def leaf_centers(self) -> np.ndarray:
        return (self.leaf_lower + self.leaf_upper) / 2.0

    def leaf_volumes(self) -> np.ndarray:
        if self.geometry != "axis_parallel":
            raise ValidationError("exact leaf volumes exist only for axis-parallel trees")
        return np.prod(self.leaf_upper - self.leaf_lower, axis=1)

    def leaf_l1_diameters(self) -> np.ndarray:
        return np.sum(self.leaf_upper - self.leaf_lower, axis=1)

    # -- introspection ----------------------------------------------------

    @property
    def splits(self) -> tuple:
        out = []
        for i in range(self.n_splits):
            if self.geometry == "axis_parallel":
                out.append(
                    AxisSplit(
                        int(self.split_leaf[i]),
                        int(self.split_dim[i]),
                        float(self.split_ratio[i]),
                    )
                )
            else:
                out.append(
                    ObliqueSplit(
                        int(self.split_leaf[i]),
                        self.split_normal[i].copy(),
                        float(self.split_offset[i]),
                    )
                )
        return tuple(out)

    def trace(self) -> str:
        """One line per split: leaf_id, dim/normal, ratio/offset."""
        lines = []
        for i in range(self.n_splits):
            if self.geometry == "axis_parallel":
                lines.append(
                    f"{self.split_leaf[i]},{self.split_dim[i]},{float(self.split_ratio[i])!r}"
                )
            else:
                w = " ".join(repr(float(v)) for v in self.split_normal[i])
                lines.append(f"{self.split_leaf[i]},{w},{float(self.split_offset[i])!r}")
        return "\n".join(lines)

    # -- serialization ----------------------------------------------------

    def to_payload(self) -> dict:
        payload = {
            "geometry": self.geometry,
            "root_lower": self.root_lower,
            "root_upper": self.root_upper,
            "split_leaf": self.split_leaf,
        }
        if self.geometry == "axis_parallel":
            payload["split_dim"] = self.split_dim
            payload["split_ratio"] = self.split_ratio
        else:
            payload["split_normal"] = self.split_normal
            payload["split_offset"] = self.split_offset
        return payload

    @classmethod
    def from_payload(cls, payload: dict) -> "PartitionTree":
        geometry = payload["geometry"]
        root_lower = np.ascontiguousarray(payload["root_lower"], dtype=np.float64)
        root_upper = np.ascontiguousarray(payload["root_upper"], dtype=np.float64)
        split_leaf = np.ascontiguousarray(payload["split_leaf"], dtype=np.int32)
        p = split_leaf.shape[0]
        d = root_lower.shape[0]
        if geometry == "axis_parallel":
            split_dim = np.ascontiguousarray(payload["split_dim"], dtype=np.int32)
            split_ratio = np.ascontiguousarray(payload["split_ratio"], dtype=np.float64)
            (
                lower,
                upper,
                cuts,
                node_split,
                node_left,
                node_right,
                node_parent,
                node_side,
                node_leaf,
                leaf_node,
            ) = _kernels.replay_axis(
                p, d, root_lower, root_upper, split_leaf, split_dim, split_ratio
            )
            arrays = dict(
                split_leaf=split_leaf,
                split_dim=split_dim,
                split_ratio=split_ratio,
                split_cut=cuts,
                split_normal=None,
                split_offset=None,
                node_split=node_split,
                node_left=node_left,
                node_right=node_right,
                node_parent=node_parent,
                node_side=node_side,
                node_leaf=node_leaf,
                leaf_lower=lower,
                leaf_upper=upper,
                leaf_node=leaf_node,
            )
            return cls(geometry, root_lower, root_upper, arrays)
        builder = _TreeBuilder(root_lower, root_upper, "oblique", capacity=max(p, 1))
        normals = np.ascontiguousarray(payload["split_normal"], dtype=np.float64)
        offsets = np.ascontiguousarray(payload["split_offset"], dtype=np.float64)
        for i in range(p):
            builder.split_oblique(int(split_leaf[i]), normals[i], float(offsets[i]), check=False)
        return builder.freeze()


class _TreeBuilder:
    """Mutable partition under construction; freeze() yields a PartitionTree."""

    def __init__(self, root_lower, root_upper, geometry, capacity=4):
        root_lower = np.ascontiguousarray(root_lower, dtype=np.float64)
        root_upper = np.ascontiguousarray(root_upper, dtype=np.float64)
        if geometry not in ("axis_parallel", "oblique"):
            raise ValidationError(f"unknown geometry {geometry!r}")
        self.geometry = geometry
        self.dim = root_lower.shape[0]
        self.root_lower = root_lower
        self.root_upper = root_upper
        cap = max(int(capacity), 4)
        self.p = 0
        self.split_leaf = np.empty(cap, np.int32)
        if geometry == "axis_parallel":
            self.split_dim = np.empty(cap, np.int32)
            self.split_ratio = np.empty(cap, np.float64)
            self.split_cut = np.empty(cap, np.float64)
        else:
            self.split_normal = np.empty((cap, self.dim), np.float64)
            self.split_offset = np.empty(cap, np.float64)
        nn = 2 * cap + 1
        self.node_split = np.full(nn, -1, np.int32)
        self.node_left = np.full(nn, -1, np.int32)
        self.node_right = np.full(nn, -1, np.int32)
        self.node_parent = np.full(nn, -1, np.int32)
        self.node_side = np.zeros(nn, np.int8)
        self.node_leaf = np.full(nn, -1, np.int32)
        self.node_leaf[0] = 0
        self.next_node = 1
        self.leaf_lower = np.empty((cap + 1, self.dim), np.float64)
        self.leaf_upper = np.empty((cap + 1, self.dim), np.float64)
        self.leaf_lower[0] = root_lower
        self.leaf_upper[0] = root_upper
        self.leaf_node = np.zeros(cap + 1, np.int32)
        self._capacity = cap

    @classmethod
    def from_tree(cls, tree: PartitionTree) -> "_TreeBuilder":
        b = cls(tree.root_lower, tree.root_upper, tree.geometry, capacity=tree.n_splits + 4)
        p = tree.n_splits
        b.p = p
        b.split_leaf[:p] = tree.split_leaf
        if tree.geometry == "axis_parallel":
            b.split_dim[:p] = tree.split_dim
            b.split_ratio[:p] = tree.split_ratio
            b.split_cut[:p] = tree.split_cut
        else:
            b.split_normal[:p] = tree.split_normal
            b.split_offset[:p] = tree.split_offset
        nn = 2 * p + 1
        b.node_split[:nn] = tree.node_split
        b.node_left[:nn] = tree.node_left
        b.node_right[:nn] = tree.node_right
        b.node_parent[:nn] = tree.node_parent
        b.node_side[:nn] = tree.node_side
        b.node_leaf[:nn] = tree.node_leaf
        b.next_node = nn
        b.leaf_lower[: p + 1] = tree.leaf_lower
        b.leaf_upper[: p + 1] = tree.leaf_upper
        b.leaf_node[: p + 1] = tree.leaf_node
        return b

    def _ensure(self, extra: int):
        need = self.p + extra
        if need <= self._capacity:
            return
        cap = max(need, self._capacity * 2)

        def grow(a, shape0, fill=None):
            new_shape = (shape0,) + a.shape[1:]
            out = np.empty(new_shape, a.dtype) if fill is None else np.full(new_shape, fill, a.dtype)
            out[: a.shape[0]] = a
            return out

        self.split_leaf = grow(self.split_leaf, cap)
        if self.geometry == "axis_parallel":
            self.split_dim = grow(self.split_dim, cap)
            self.split_ratio = grow(self.split_ratio, cap)
            self.split_cut = grow(self.split_cut, cap)
        else:
            self.split_normal = grow(self.split_normal, cap)
            self.split_offset = grow(self.split_offset, cap)
        nn = 2 * cap + 1
        self.node_split = grow(self.node_split, nn, fill=-1)
        self.node_left = grow(self.node_left, nn, fill=-1)
        self.node_right = grow(self.node_right, nn, fill=-1)
        self.node_parent = grow(self.node_parent, nn, fill=-1)
        self.node_side = grow(self.node_side, nn, fill=0)
        self.node_leaf = grow(self.node_leaf, nn, fill=-1)
        self.leaf_lower = grow(self.leaf_lower, cap + 1)
        self.leaf_upper = grow(self.leaf_upper, cap + 1)
        self.leaf_node = grow(self.leaf_node, cap + 1)
        self._capacity = cap

    @property
    def n_leaves(self) -> int:
        return self.p + 1

    def _attach(self, leaf_id: int, split_index: int) -> int:
        new_leaf = self.p + 1
        parent = int(self.leaf_node[leaf_id])
        a = self.next_node
        b = self.next_node + 1
        self.next_node += 2
        self.node_split[parent] = split_index
        self.node_left[parent] = a
        self.node_right[parent] = b
        self.node_leaf[parent] = -1
        self.node_parent[a] = parent
        self.node_parent[b] = parent
        self.node_side[a] = 0
        self.node_side[b] = 1
        self.node_leaf[a] = leaf_id
        self.node_leaf[b] = new_leaf
        self.leaf_node[leaf_id] = a
        self.leaf_node[new_leaf] = b
        return new_leaf

    def split_axis(self, leaf_id: int, dim: int, ratio: float) -> int:
        if self.geometry != "axis_parallel":
            raise ValidationError("axis split on a non-axis-parallel tree")
        if not 0 <= leaf_id < self.n_leaves:
            raise ValidationError(f"stale or invalid leaf id {leaf_id}")
        if not 0 <= dim < self.dim:
            raise ValidationError(f"split dimension {dim} out of range")
        if not 0.0 < ratio < 1.0:
            raise ValidationError("split ratio must lie strictly inside (0, 1)")
        self._ensure(1)
        lo = self.leaf_lower[leaf_id, dim]
        hi = self.leaf_upper[leaf_id, dim]
        cut = lo + ratio * (hi - lo)
        if cut <= lo:
            cut = np.nextafter(lo, hi)
        if cut >= hi:
            cut = np.nextafter(hi, lo)
        i = self.p
        self.split_leaf[i] = leaf_id
        self.split_dim[i] = dim
        self.split_ratio[i] = ratio
        self.split_cut[i] = cut
        new_leaf = self._attach(leaf_id, i)
        self.leaf_lower[new_leaf] = self.leaf_lower[leaf_id]
        self.leaf_upper[new_leaf] = self.leaf_upper[leaf_id]
        self.leaf_lower[new_leaf, dim] = cut
        self.leaf_upper[leaf_id, dim] = cut
        self.p += 1
        return new_leaf

    def split_oblique(self, leaf_id: int, normal, offset: float, check: bool = True) -> int:
        if self.geometry != "oblique":
            raise ValidationError("oblique split on a non-oblique tree")
        if not 0 <= leaf_id < self.n_leaves:
            raise ValidationError(f"stale or invalid leaf id {leaf_id}")
        w = np.ascontiguousarray(normal, dtype=np.float64)
        if w.shape != (self.dim,):
            raise ValidationError("normal vector has wrong dimension")
        b = float(offset)
        lo = self.leaf_lower[leaf_id].copy()
        hi = self.leaf_upper[leaf_id].copy()
        if check and not _crosses_box(w, b, lo, hi):
            raise HyperplaneMissError(
                f"hyperplane misses the bounding box of leaf {leaf_id}"
            )
        self._ensure(1)
        i = self.p
        self.split_leaf[i] = leaf_id
        self.split_normal[i] = w
        self.split_offset[i] = b
        new_leaf = self._attach(leaf_id, i)
        new_lo_l, new_hi_l = _clip_box_halfspace(lo, hi, w, b)
        new_lo_r, new_hi_r = _clip_box_halfspace(lo, hi, -w, -b)
        self.leaf_lower[leaf_id] = new_lo_l
        self.leaf_upper[leaf_id] = new_hi_l
        self.leaf_lower[new_leaf] = new_lo_r
        self.leaf_upper[new_leaf] = new_hi_r
        self.p += 1
        return new_leaf

    def freeze(self) -> PartitionTree:
        p = self.p
        nn = 2 * p + 1
        arrays = dict(
            split_leaf=self.split_leaf[:p].copy(),
            split_dim=self.split_dim[:p].copy() if self.geometry == "axis_parallel" else None,
            split_ratio=self.split_ratio[:p].copy() if self.geometry == "axis_parallel" else None,
            split_cut=self.split_cut[:p].copy() if self.geometry == "axis_parallel" else None,
            split_normal=self.split_normal[:p].copy() if self.geometry == "oblique" else None,
            split_offset=self.split_offset[:p].copy() if self.geometry == "oblique" else None,
            node_split=self.node_split[:nn].copy(),
            node_left=self.node_left[:nn].copy(),
            node_right=self.node_right[:nn].copy(),
            node_parent=self.node_parent[:nn].copy(),
            node_side=self.node_side[:nn].copy(),
            node_leaf=self.node_leaf[:nn].copy(),
            leaf_lower=self.leaf_lower[: p + 1].copy(),
            leaf_upper=self.leaf_upper[: p + 1].copy(),
            leaf_node=self.leaf_node[: p + 1].copy(),
        )
        return PartitionTree(self.geometry, self.root_lower, self.root_upper, arrays)


# -- public split operations ------------------------------------------------


def apply_axis_split(tree: PartitionTree, split: AxisSplit) -> PartitionTree:
    """Return a new tree with one more axis-parallel cut."""
    builder = _TreeBuilder.from_tree(tree)
    builder.split_axis(split.leaf_id, split.dim, split.ratio)
    return builder.freeze()


def apply_oblique_split(tree: PartitionTree, split: ObliqueSplit) -> PartitionTree:
    """Return a new tree with one more halfspace cut.

    Raises HyperplaneMissError when the hyperplane does not cross the
    leaf's bounding box; the caller owns the resample-and-retry policy.
    """
    builder = _TreeBuilder.from_tree(tree)
    builder.split_oblique(split.leaf_id, split.normal, split.offset)
    return builder.freeze()


def choose_leaf_uniform(tree: PartitionTree, stream: RandomStream) -> int:
    """Pick a leaf uniformly at random (one draw from the stream)."""
    u = float(stream.random())
    idx = int(u * tree.n_leaves)
    return min(idx, tree.n_leaves - 1)


def choose_leaf_adaptive(
    tree: PartitionTree, data_in_root: Dataset, t: int, stream: RandomStream
) -> int:
    """Pick the leaf holding the plurality of t sampled points.

    Points are sampled i.i.d. with replacement from the data; ties break
    to the smallest leaf id.
    """
    n = len(data_in_root)
    if n == 0:
        raise ValidationError("adaptive leaf choice requires samples in the root")
    if t < 1:
        raise ValidationError("vote count t must be >= 1")
    idx = stream.integers(n, size=t)
    located = tree.locate_batch(data_in_root.features[idx])
    counts = np.bincount(located, minlength=tree.n_leaves)
    return int(np.argmax(counts))


def split_budget(cell_sample_count: int, pro: float, cap: int) -> int:
    """min(round(pro * count), cap); the cap comes from max_splits(M, lambda)."""
    if not 0.0 < pro <= 1.0:
        raise ValidationError("pro must lie in (0, 1]")
    if cell_sample_count < 0:
        raise ValidationError("sample count must be nonnegative")
    if cap < 0:
        raise ValidationError("cap must be nonnegative")
    return min(int(math.floor(pro * cell_sample_count + 0.5)), cap)


def root_box_for(features: np.ndarray, margin: float = ROOT_MARGIN) -> AxisBox:
    """Bounding box of the features, inflated by ``margin`` per side.

    Dimensions with zero extent get an absolute pad of 0.5 so the box
    stays non-degenerate.
    """
    lo = features.min(axis=0)
    hi = features.max(axis=0)
    extent = hi - lo
    pad = np.where(extent > 0.0, margin * extent, 0.5)
    return AxisBox(lo - pad, hi + pad)


# -- builders -----------------------------------------------------------------


def _trivial_tree(root_box: AxisBox, geometry: str) -> PartitionTree:
    builder = _TreeBuilder(root_box.lower, root_box.upper, geometry, capacity=1)
    return builder.freeze()


def _grow_axis_tree(root_box, X, p, votes, stream, adaptive):
    """Axis-parallel growth via the jitted kernel; returns (tree, sample leaf ids)."""
    d = root_box.dim
    n = X.shape[0]
    leaf_ids = np.zeros(n, np.int32)
    if p == 0:
        return _trivial_tree(root_box, "axis_parallel"), leaf_ids
    lower = np.empty((p + 1, d), np.float64)
    upper = np.empty((p + 1, d), np.float64)
    lower[0] = root_box.lower
    upper[0] = root_box.upper
    if adaptive:
        vote_idx = stream.child(rng.VOTES).integers(n, size=(p, votes)).astype(np.int64)
        leaf_u = np.empty(0, np.float64)
    else:
        vote_idx = np.empty((0, 0), np.int64)
        leaf_u = stream.child(rng.LEAF_CHOICE).random(p)
    dims = stream.child(rng.DIMS).integers(d, size=p).astype(np.int64)
    ratios = stream.child(rng.RATIOS).uniform_open(p)
    (
        split_leaf,
        cuts,
        node_split,
        node_left,
        node_right,
        node_parent,
        node_side,
        node_leaf,
        leaf_node,
    ) = _kernels.grow_axis(
        np.ascontiguousarray(X), leaf_ids, p, lower, upper, vote_idx, leaf_u, dims, ratios, adaptive
    )
    arrays = dict(
        split_leaf=split_leaf,
        split_dim=dims.astype(np.int32),
        split_ratio=ratios,
        split_cut=cuts,
        split_normal=None,
        split_offset=None,
        node_split=node_split,
        node_left=node_left,
        node_right=node_right,
        node_parent=node_parent,
        node_side=node_side,
        node_leaf=node_leaf,
        leaf_lower=lower,
        leaf_upper=upper,
        leaf_node=leaf_node,
    )
    tree = PartitionTree("axis_parallel", root_box.lower.copy(), root_box.upper.copy(), arrays)
    return tree, leaf_ids


def _grow_oblique_tree(root_box, X, p, votes, stream, adaptive):
    """Oblique growth; per-split python loop with jitted helpers."""
    d = root_box.dim
    n = X.shape[0]
    X = np.ascontiguousarray(X)
    leaf_ids = np.zeros(n, np.int32)
    if p == 0:
        return _trivial_tree(root_box, "oblique"), leaf_ids
    builder = _TreeBuilder(root_box.lower, root_box.upper, "oblique", capacity=p)
    votes_stream = stream.child(rng.VOTES)
    dims_stream = stream.child(rng.DIMS)
    ratios_stream = stream.child(rng.RATIOS)
    normals_stream = stream.child(rng.NORMALS)
    leaf_stream = stream.child(rng.LEAF_CHOICE)
    for i in range(p):
        n_leaves = i + 1
        if adaptive:
            vote_rows = votes_stream.integers(n, size=votes)
            labels = leaf_ids[vote_rows]
            counts = np.bincount(labels, minlength=n_leaves)
            chosen = int(np.argmax(counts))
            voter_pts = X[vote_rows[labels == chosen]]
        else:
            u = float(leaf_stream.random())
            chosen = min(int(u * n_leaves), n_leaves - 1)
            voter_pts = X[:0]
        if voter_pts.shape[0] == 0:
            voter_pts = X[leaf_ids == chosen]
        if voter_pts.shape[0] > 0:
            centroid = voter_pts.mean(axis=0)
        else:
            centroid = (builder.leaf_lower[chosen] + builder.leaf_upper[chosen]) / 2.0
        lo = builder.leaf_lower[chosen]
        hi = builder.leaf_upper[chosen]
        placed = False
        for _attempt in range(OBLIQUE_RETRIES):
            w = normals_stream.uniform(-1.0, 1.0, size=d)
            b = -float(w @ centroid)
            if _crosses_box(w, b, lo, hi):
                placed = True
                break
        if not placed:
            # Fall back to an axis-parallel cut of the bounding box,
            # represented as a one-hot halfspace.
            k = int(dims_stream.integers(d))
            r = float(ratios_stream.uniform_open())
            lo_k = lo[k]
            hi_k = hi[k]
            cut = lo_k + r * (hi_k - lo_k)
            if cut <= lo_k:
                cut = np.nextafter(lo_k, hi_k)
            if cut >= hi_k:
                cut = np.nextafter(hi_k, lo_k)
            w = np.zeros(d)
            w[k] = 1.0
            b = -cut
        new_leaf = builder.split_oblique(chosen, w, b, check=False)
        _kernels.assign_halfspace(X, leaf_ids, chosen, w, b, new_leaf)
    return builder.freeze(), leaf_ids


def build_stage_one(
    data: Dataset,
    m: int,
    t: int,
    geometry: str,
    stream: RandomStream,
    root_box: AxisBox | None = None,
) -> PartitionTree:
    """Adaptive random partition of the whole feature space into m cells."""
    if m < 1:
        raise ValidationError("cell count m must be >= 1")
    if len(data) == 0:
        raise ValidationError("stage one requires a non-empty dataset")
    if root_box is None:
        root_box = root_box_for(data.features)
    if geometry == "axis_parallel":
        tree, _ = _grow_axis_tree(root_box, data.features, m - 1, t, stream, adaptive=True)
    elif geometry == "oblique":
        tree, _ = _grow_oblique_tree(root_box, data.features, m - 1, t, stream, adaptive=True)
    else:
        raise ValidationError(f"unknown geometry {geometry!r}")
    return tree


def build_stage_two(
    cell: Cell,
    cell_data: Dataset,
    p: int,
    t: int,
    geometry: str,
    stream: RandomStream,
    pure: bool = False,
) -> PartitionTree:
    """Partition of one cell with p splits.

    Leaf choice is adaptive (plurality of t sampled cell points) by
    default; ``pure`` switches to the uniform choice, which also works on
    an empty cell.
    """
    tree, _ = build_stage_two_with_ids(cell, cell_data, p, t, geometry, stream, pure)
    return tree


def build_stage_two_with_ids(
    cell: Cell,
    cell_data: Dataset,
    p: int,
    t: int,
    geometry: str,
    stream: RandomStream,
    pure: bool = False,
):
    """build_stage_two plus the final leaf id of every cell sample."""
    if p < 0:
        raise ValidationError("split count p must be >= 0")
    adaptive = not pure
    if adaptive and p > 0 and len(cell_data) == 0:
        raise ValidationError("adaptive stage-two splitting requires cell samples")
    box = cell.bounding_box
    if geometry == "axis_parallel":
        return _grow_axis_tree(box, cell_data.features, p, t, stream, adaptive)
    if geometry == "oblique":
        return _grow_oblique_tree(box, cell_data.features, p, t, stream, adaptive)
    raise ValidationError(f"unknown geometry {geometry!r}")
