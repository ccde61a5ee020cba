"""Core domain types, dataset I/O, and shared scoring primitives."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields, replace
from typing import Iterator, Mapping

import numpy as np

from .rng import RandomStream


class BsforestError(Exception):
    """Base class for all errors raised by this package."""


class DataFormatError(BsforestError):
    """Malformed input file (CSV data or key=value config)."""


class ValidationError(BsforestError):
    """Invalid parameter value, shape, or dimension."""


class NumericError(BsforestError):
    """A numeric routine failed (singular or unstable linear system)."""


class ModelFormatError(BsforestError):
    """Model file is corrupt, truncated, or has an unsupported version."""


@dataclass(frozen=True)
class Sample:
    """One observation: a d-dimensional feature vector and a scalar target."""

    features: np.ndarray
    target: float


class Dataset:
    """n samples of d-dimensional features with scalar targets.

    ``target_bound`` is the bound M with |target| <= M for every sample;
    when not supplied it is computed as max |y| at construction.  Arrays
    are locked after construction, so instances are safe to share across
    concurrent tasks.
    """

    __slots__ = ("features", "targets", "target_bound")

    def __init__(self, features, targets, target_bound: float | None = None):
        feats = np.array(features, dtype=np.float64, order="C")
        targs = np.array(targets, dtype=np.float64)
        if feats.ndim != 2:
            raise ValidationError("features must be a 2-d array of shape (n, d)")
        if targs.ndim != 1 or targs.shape[0] != feats.shape[0]:
            raise ValidationError("targets must be 1-d with one entry per feature row")
        if feats.shape[1] < 1:
            raise ValidationError("need at least one feature column")
        if feats.size and not np.isfinite(feats).all():
            raise ValidationError("features contain NaN or Inf")
        if targs.size and not np.isfinite(targs).all():
            raise ValidationError("targets contain NaN or Inf")
        max_abs = float(np.max(np.abs(targs))) if targs.size else 0.0
        if target_bound is None:
            # All-zero targets still need a positive bound; any value works
            # because every fitted value is then zero as well.
            target_bound = max_abs if max_abs > 0.0 else 1.0
        else:
            target_bound = float(target_bound)
            if not math.isfinite(target_bound) or target_bound <= 0.0:
                raise ValidationError("target_bound must be a positive finite real")
            if target_bound < max_abs:
                raise ValidationError(
                    f"target_bound {target_bound} is below max |target| = {max_abs}"
                )
        feats.setflags(write=False)
        targs.setflags(write=False)
        self.features = feats
        self.targets = targs
        self.target_bound = target_bound

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def samples(self) -> Iterator[Sample]:
        for i in range(self.n):
            yield Sample(self.features[i], float(self.targets[i]))

    def subset(self, indices) -> "Dataset":
        """Row subset; keeps the parent's target bound (still a valid bound)."""
        return Dataset(
            self.features[indices], self.targets[indices], target_bound=self.target_bound
        )


def load_csv(path, has_header: bool = False) -> Dataset:
    """Load a numeric CSV with the target in the last column.

    Every data row must have the same number of fields (d features then
    the target).  Errors report the 1-based line number in the file.
    """
    feat_rows: list[list[float]] = []
    targ: list[float] = []
    width = None
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if has_header and line_no == 1:
                continue
            if not row:
                continue  # tolerate blank lines
            if width is None:
                width = len(row)
                if width < 2:
                    raise DataFormatError(
                        f"{path}: row {line_no}: need at least 2 columns (features, then target)"
                    )
            elif len(row) != width:
                raise DataFormatError(
                    f"{path}: row {line_no}: expected {width} fields, found {len(row)}"
                )
            vals = []
            for tok in row:
                try:
                    v = float(tok)
                except ValueError:
                    raise DataFormatError(
                        f"{path}: row {line_no}: non-numeric field {tok!r}"
                    ) from None
                if not math.isfinite(v):
                    raise DataFormatError(
                        f"{path}: row {line_no}: non-finite value {tok!r}"
                    )
                vals.append(v)
            feat_rows.append(vals[:-1])
            targ.append(vals[-1])
    if not feat_rows:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset(np.asarray(feat_rows), np.asarray(targ))


def load_matrix_csv(path, has_header: bool = False):
    """Load a numeric CSV as (header, matrix); rows may be empty.

    Used for prediction inputs, which may be features-only and may have
    zero data rows.
    """
    rows: list[list[float]] = []
    header = None
    width = None
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if has_header and line_no == 1:
                header = list(row)
                continue
            if not row:
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataFormatError(
                    f"{path}: row {line_no}: expected {width} fields, found {len(row)}"
                )
            vals = []
            for tok in row:
                try:
                    v = float(tok)
                except ValueError:
                    raise DataFormatError(
                        f"{path}: row {line_no}: non-numeric field {tok!r}"
                    ) from None
                if not math.isfinite(v):
                    raise DataFormatError(
                        f"{path}: row {line_no}: non-finite value {tok!r}"
                    )
                vals.append(v)
            rows.append(vals)
    if rows:
        mat = np.asarray(rows, dtype=np.float64)
    else:
        mat = np.empty((0, len(header) if header else 0), dtype=np.float64)
    return header, mat


def train_test_split(data: Dataset, test_fraction: float, stream: RandomStream):
    """Disjoint shuffled split with train size round((1 - test_fraction) * n)."""
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError("test_fraction must lie in (0, 1)")
    n = len(data)
    if n < 2:
        raise ValidationError("need at least 2 samples to split")
    n_train = int(round((1.0 - test_fraction) * n))
    if n_train <= 0 or n_train >= n:
        raise ValidationError(
            f"degenerate split: n={n}, test_fraction={test_fraction} leaves an empty part"
        )
    perm = stream.permutation(n)
    return data.subset(perm[:n_train]), data.subset(perm[n_train:])


def mse(predictions, targets) -> float:
    """Mean squared error (1/n) sum (y_i - f(x_i))^2."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.ndim != 1 or t.ndim != 1 or p.shape != t.shape:
        raise ValidationError("predictions and targets must be 1-d and equal length")
    if p.size == 0:
        raise ValidationError("mse of empty vectors is undefined")
    return float(np.mean((p - t) ** 2))


def penalized_score(empirical_risk: float, splits: int, lam: float) -> float:
    """Penalized objective lambda * p^2 + empirical risk."""
    if empirical_risk < 0.0:
        raise ValidationError("empirical_risk must be nonnegative")
    if splits < 0:
        raise ValidationError("splits must be nonnegative")
    if lam <= 0.0:
        raise ValidationError("lambda must be positive")
    return lam * splits * splits + empirical_risk


def max_splits(target_bound: float, lam: float) -> int:
    """Split budget cap floor(M * lambda^(-1/2)).

    Values within 1e-9 relative of an integer are treated as that integer
    so exact mathematical boundaries are not lost to sqrt rounding.
    """
    if target_bound <= 0.0:
        raise ValidationError("target_bound must be positive")
    if lam <= 0.0:
        raise ValidationError("lambda must be positive")
    v = target_bound / math.sqrt(lam)
    r = round(v)
    if abs(v - r) <= 1e-9 * max(1.0, abs(r)):
        v = float(r)
    return max(int(math.floor(v)), 0)


LEAF_MODELS = ("constant", "linear", "gaussian")
VACANCY_FILLS = ("mean", "one_nn")
GEOMETRIES = ("axis_parallel", "oblique")
SCORINGS = ("penalized_risk", "holdout")


@dataclass(frozen=True)
class HyperParams:
    """Training configuration.

    ``penalty`` is the per-cell regularization weight applied uniformly;
    ``penalty_per_cell`` optionally overrides it with one value per
    stage-one cell.  ``pure`` switches stage-two leaf choice from the
    adaptive sampled vote to the uniform rule.
    """

    trees: int = 50
    cells: int = 20
    candidates: int = 10
    pro: float = 0.5
    votes: int = 10
    penalty: float = 1e-8
    leaf_model: str = "constant"
    vacancy_fill: str = "mean"
    geometry: str = "axis_parallel"
    scoring: str = "holdout"
    holdout_fraction: float = 0.3
    c_grid: tuple = (0.1, 1.0, 10.0, 100.0)
    gamma_grid: tuple = (0.01, 0.1, 1.0, 10.0)
    min_leaf_for_model: int | None = None
    pure: bool = False
    penalty_per_cell: tuple | None = None
    master_seed: int = 0

    def validate(self) -> None:
        if self.trees < 1:
            raise ValidationError("trees must be >= 1")
        if self.cells < 1:
            raise ValidationError("cells must be >= 1")
        if self.candidates < 1:
            raise ValidationError("candidates must be >= 1")
        if not 0.0 < self.pro <= 1.0:
            raise ValidationError("pro must lie in (0, 1]")
        if self.votes < 1:
            raise ValidationError("votes must be >= 1")
        if self.penalty <= 0.0:
            raise ValidationError("lambda must be positive")
        if self.leaf_model not in LEAF_MODELS:
            raise ValidationError(f"leaf_model must be one of {LEAF_MODELS}")
        if self.vacancy_fill not in VACANCY_FILLS:
            raise ValidationError(f"vacancy_fill must be one of {VACANCY_FILLS}")
        if self.geometry not in GEOMETRIES:
            raise ValidationError(f"geometry must be one of {GEOMETRIES}")
        if self.scoring not in SCORINGS:
            raise ValidationError(f"scoring must be one of {SCORINGS}")
        if self.vacancy_fill == "one_nn" and self.geometry != "axis_parallel":
            raise ValidationError("one_nn vacancy fill requires axis_parallel geometry")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValidationError("holdout_fraction must lie in (0, 1)")
        if self.leaf_model in ("linear", "gaussian"):
            if len(self.c_grid) == 0:
                raise ValidationError("c_grid must be non-empty for this leaf model")
            if any(c <= 0 for c in self.c_grid):
                raise ValidationError("c_grid values must be positive")
        if self.leaf_model == "gaussian":
            if len(self.gamma_grid) == 0:
                raise ValidationError("gamma_grid must be non-empty for gaussian leaves")
            if any(g <= 0 for g in self.gamma_grid):
                raise ValidationError("gamma_grid values must be positive")
        if self.min_leaf_for_model is not None and self.min_leaf_for_model < 1:
            raise ValidationError("min_leaf_for_model must be >= 1")
        if self.penalty_per_cell is not None:
            if len(self.penalty_per_cell) != self.cells:
                raise ValidationError(
                    "penalty_per_cell must supply exactly one value per cell"
                )
            if any(v <= 0 for v in self.penalty_per_cell):
                raise ValidationError("penalty_per_cell values must be positive")
        if not 0 <= self.master_seed < 2**64:
            raise ValidationError("master_seed must be a 64-bit unsigned integer")

    def penalty_for_cell(self, cell_id: int) -> float:
        if self.penalty_per_cell is not None:
            return float(self.penalty_per_cell[cell_id])
        return self.penalty

    def effective_min_leaf(self) -> int:
        """Leaf-size threshold below which model fitting falls back to the mean."""
        if self.min_leaf_for_model is not None:
            return self.min_leaf_for_model
        if self.leaf_model == "linear":
            return 10
        if self.leaf_model == "gaussian":
            return 2 * len(self.c_grid) * len(self.gamma_grid)
        return 1


_CONFIG_ALIASES = {
    "lambda": "penalty",
    "seed": "master_seed",
    "lambda_per_cell": "penalty_per_cell",
}

_BOOL_TOKENS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config_file(path) -> dict:
    """Read a flat key=value config file into a string mapping."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}: line {line_no}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def hyperparams_from_mapping(mapping: Mapping, base: HyperParams | None = None) -> HyperParams:
    """Build HyperParams from string key/value pairs, mirroring field names."""
    params = base if base is not None else HyperParams()
    by_name = {f.name: f for f in fields(HyperParams)}
    updates = {}
    for raw_key, raw_value in mapping.items():
        key = _CONFIG_ALIASES.get(raw_key, raw_key)
        if key not in by_name:
            raise DataFormatError(f"unknown config key {raw_key!r}")
        updates[key] = _coerce_field(key, raw_value)
    return replace(params, **updates)


def _coerce_field(key: str, value):
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if key in ("trees", "cells", "candidates", "votes", "master_seed"):
            return int(text)
        if key in ("pro", "penalty", "holdout_fraction"):
            return float(text)
        if key in ("c_grid", "gamma_grid"):
            return tuple(float(tok) for tok in text.split(",") if tok.strip())
        if key == "penalty_per_cell":
            if text.lower() in ("", "none"):
                return None
            return tuple(float(tok) for tok in text.split(",") if tok.strip())
        if key == "min_leaf_for_model":
            if text.lower() in ("", "none", "auto"):
                return None
            return int(text)
        if key == "pure":
            if text.lower() not in _BOOL_TOKENS:
                raise ValueError(text)
            return _BOOL_TOKENS[text.lower()]
    except ValueError:
        raise DataFormatError(f"config key {key!r}: cannot parse value {value!r}") from None
    return text
