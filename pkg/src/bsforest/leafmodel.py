"""Leaf value-assignment models: constant mean, linear and Gaussian LS-SVM.

The LS-SVM leaves solve the saddle system

    [ 0   1^T       ] [ b     ]   [ 0 ]
    [ 1   K + I/C   ] [ alpha ] = [ y ]

densely; leaves are small by construction, so a dense solve with a
residual check is the right tool.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, NumericError, ValidationError
from .rng import RandomStream

_RESIDUAL_RTOL = 1e-8


@dataclass(frozen=True)
class ConstantModel:
    value: float


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray
    bias: float


@dataclass(frozen=True)
class KernelModel:
    support_points: np.ndarray
    coefficients: np.ndarray
    bias: float
    gamma: float


@dataclass(frozen=True)
class ModelSearchSpec:
    """Hyperparameter grids and the leaf-level holdout fraction."""

    c_grid: tuple = (0.1, 1.0, 10.0, 100.0)
    gamma_grid: tuple = (0.01, 0.1, 1.0, 10.0)
    validation_fraction: float = 0.3

    def validate(self) -> None:
        if len(self.c_grid) == 0:
            raise ValidationError("c_grid must be non-empty")
        if len(self.gamma_grid) == 0:
            raise ValidationError("gamma_grid must be non-empty")
        if any(c <= 0 for c in self.c_grid) or any(g <= 0 for g in self.gamma_grid):
            raise ValidationError("grid values must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValidationError("validation_fraction must lie in (0, 1)")


def fit_constant(targets) -> ConstantModel:
    """Leaf mean; the 0-split tree decision rule."""
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise ValidationError("fit_constant requires a non-empty target vector")
    return ConstantModel(float(t.mean()))


def solve_lssvm(kernel_matrix, targets, c: float):
    """Solve the LS-SVM saddle system; returns (coefficients, bias).

    Raises NumericError when the system is singular or the solution's
    residual exceeds 1e-8 relative to the system scale, signalling the
    caller to fall back to a constant leaf.
    """
    K = np.asarray(kernel_matrix, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValidationError("kernel matrix must be square")
    n = K.shape[0]
    if y.shape != (n,) or n < 1:
        raise ValidationError("targets must match the kernel matrix size")
    if c <= 0:
        raise ValidationError("C must be positive")
    system = np.zeros((n + 1, n + 1), dtype=np.float64)
    system[0, 1:] = 1.0
    system[1:, 0] = 1.0
    system[1:, 1:] = K + np.eye(n) / c
    rhs = np.concatenate(([0.0], y))
    try:
        sol = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"LS-SVM system is singular: {exc}") from None
    residual = float(np.linalg.norm(system @ sol - rhs))
    scale = float(np.linalg.norm(system, "fro") * np.linalg.norm(sol) + np.linalg.norm(rhs))
    if residual > _RESIDUAL_RTOL * max(scale, 1.0):
        raise NumericError(
            f"LS-SVM solve residual {residual:.3e} exceeds tolerance at scale {scale:.3e}"
        )
    return sol[1:], float(sol[0])


def _gaussian_gram(A, B, gamma: float) -> np.ndarray:
    sq = (
        np.sum(A * A, axis=1)[:, None]
        + np.sum(B * B, axis=1)[None, :]
        - 2.0 * (A @ B.T)
    )
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-gamma * sq)


def _fit_linear(X, y, c: float) -> LinearModel:
    alpha, bias = solve_lssvm(X @ X.T, y, c)
    return LinearModel(X.T @ alpha, bias)


def _fit_kernel(X, y, c: float, gamma: float) -> KernelModel:
    alpha, bias = solve_lssvm(_gaussian_gram(X, X, gamma), y, c)
    return KernelModel(X.copy(), alpha, bias, gamma)


def predict_leaf(model, x, bound: float | None = None) -> float:
    """Evaluate a leaf model at one point, clamping to [-bound, bound] if given."""
    x = np.asarray(x, dtype=np.float64)
    return float(predict_leaf_batch(model, x[None, :], bound)[0])


def predict_leaf_batch(model, X, bound: float | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError("expected a 2-d array of query points")
    if isinstance(model, ConstantModel):
        out = np.full(X.shape[0], model.value)
    elif isinstance(model, LinearModel):
        if X.shape[1] != model.weights.shape[0]:
            raise ValidationError("query dimension does not match the linear model")
        out = X @ model.weights + model.bias
    elif isinstance(model, KernelModel):
        if X.shape[1] != model.support_points.shape[1]:
            raise ValidationError("query dimension does not match the kernel model")
        out = _gaussian_gram(X, model.support_points, model.gamma) @ model.coefficients
        out += model.bias
    else:
        raise ValidationError(f"unknown leaf model {type(model).__name__}")
    if bound is not None:
        np.clip(out, -bound, bound, out=out)
    return out


def fit_leaf(
    samples: Dataset,
    variant: str,
    spec: ModelSearchSpec,
    stream: RandomStream,
    min_leaf_for_model: int,
):
    """Fit one leaf's value model.

    Linear and gaussian variants grid-search (C) or (C, gamma) on a fixed
    70/30 split of the leaf samples (ties prefer smaller C, then smaller
    gamma), then refit the winner on all leaf samples.  Below
    ``min_leaf_for_model`` samples, or on solver failure, the leaf falls
    back to its mean.
    """
    n = len(samples)
    if n == 0:
        raise ValidationError("fit_leaf requires a non-empty leaf")
    if variant == "constant":
        return fit_constant(samples.targets)
    if variant not in ("linear", "gaussian"):
        raise ValidationError(f"unknown leaf model variant {variant!r}")
    spec.validate()
    if n < max(min_leaf_for_model, 2):
        return fit_constant(samples.targets)

    n_fit = int(round((1.0 - spec.validation_fraction) * n))
    if n_fit < 1 or n_fit >= n:
        return fit_constant(samples.targets)
    perm = stream.permutation(n)
    fit_idx, val_idx = perm[:n_fit], perm[n_fit:]
    Xf, yf = samples.features[fit_idx], samples.targets[fit_idx]
    Xv, yv = samples.features[val_idx], samples.targets[val_idx]

    if variant == "linear":
        grid = [(c, None) for c in sorted(_as_floats(spec.c_grid))]
    else:
        grid = [
            (c, g)
            for c in sorted(_as_floats(spec.c_grid))
            for g in sorted(_as_floats(spec.gamma_grid))
        ]

    best = None
    best_err = np.inf
    for c, g in grid:
        try:
            model = _fit_linear(Xf, yf, c) if g is None else _fit_kernel(Xf, yf, c, g)
        except NumericError:
            continue
        err = float(np.mean((predict_leaf_batch(model, Xv) - yv) ** 2))
        if err < best_err:
            best_err = err
            best = (c, g)
    if best is None:
        return fit_constant(samples.targets)
    c, g = best
    try:
        X, y = samples.features, samples.targets
        return _fit_linear(X, y, c) if g is None else _fit_kernel(X, y, c, g)
    except NumericError:
        return fit_constant(samples.targets)


def _as_floats(values):
    return [float(v) for v in values]
