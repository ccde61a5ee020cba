"""Command-line front end: train, predict, evaluate, synth, bench, grid-export.

Exit codes: 0 success, 2 usage, 3 I/O, 4 invalid data or parameters,
5 numeric failure.
"""

from __future__ import annotations

import csv
import itertools
import sys
import time
from dataclasses import dataclass, fields

import click
import numpy as np

from . import forest as forest_mod
from . import rng
from .core import (
    DataFormatError,
    Dataset,
    HyperParams,
    ModelFormatError,
    NumericError,
    ValidationError,
    hyperparams_from_mapping,
    load_csv,
    load_matrix_csv,
    mse,
    parse_config_file,
    train_test_split,
)
from .rng import RandomStream

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_NUMERIC = 5


@dataclass(frozen=True)
class RunReport:
    """Result of one training run, written as key=value text and a CSV row."""

    params: HyperParams
    train_time_seconds: float
    test_mse: float
    per_tree_mse: tuple
    n_train: int
    n_test: int
    seed: int

    def to_text(self) -> str:
        lines = []
        for f in fields(HyperParams):
            value = getattr(self.params, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            lines.append(f"{f.name}={value}")
        lines.append(f"seed={self.seed}")
        lines.append(f"n_train={self.n_train}")
        lines.append(f"n_test={self.n_test}")
        lines.append(f"train_time_seconds={self.train_time_seconds!r}")
        lines.append(f"test_mse={self.test_mse!r}")
        lines.append("per_tree_mse=" + ",".join(repr(v) for v in self.per_tree_mse))
        return "\n".join(lines) + "\n"

    def csv_header_row(self):
        header = [
            "trees",
            "cells",
            "candidates",
            "pro",
            "seed",
            "n_train",
            "n_test",
            "train_time_seconds",
            "test_mse",
        ]
        row = [
            self.params.trees,
            self.params.cells,
            self.params.candidates,
            repr(self.params.pro),
            self.seed,
            self.n_train,
            self.n_test,
            repr(self.train_time_seconds),
            repr(self.test_mse),
        ]
        return header, row


def make_sin_data(n: int, noise_sd: float, seed: int):
    """x ~ U(0, 10), y = sin x + N(0, noise_sd^2); returns (x, y) arrays."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if noise_sd < 0:
        raise ValidationError("noise_sd must be >= 0")
    stream = RandomStream(seed).child(rng.SYNTH)
    x = stream.child(0).random(n) * 10.0
    y = np.sin(x)
    if noise_sd > 0:
        y = y + stream.child(1).normal(0.0, noise_sd, n)
    return x, y


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if header is not None:
            writer.writerow(header)
        writer.writerows(rows)


def _fmt(value: float) -> str:
    return repr(float(value))


# -- command implementations (plain functions, also the library surface) ------


def cmd_train(
    data_csv,
    model_out,
    params: HyperParams,
    test_fraction: float = 0.3,
    has_header: bool = False,
    workers: int | None = None,
    dump_test_csv=None,
) -> RunReport:
    data = load_csv(data_csv, has_header=has_header)
    master = RandomStream(params.master_seed)
    train_data, test_data = train_test_split(data, test_fraction, master.child(rng.SPLIT))
    t0 = time.perf_counter()
    model = forest_mod.train(train_data, params, workers=workers)
    train_time = time.perf_counter() - t0
    per_tree = forest_mod.per_parent_predictions(model, test_data.features)
    per_tree_mse = tuple(mse(row, test_data.targets) for row in per_tree)
    test_mse = mse(forest_mod.predict_batch(model, test_data.features), test_data.targets)
    forest_mod.save(model, model_out)
    report = RunReport(
        params=params,
        train_time_seconds=train_time,
        test_mse=test_mse,
        per_tree_mse=per_tree_mse,
        n_train=len(train_data),
        n_test=len(test_data),
        seed=params.master_seed,
    )
    with open(f"{model_out}.meta.txt", "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    header, row = report.csv_header_row()
    _write_rows(f"{model_out}.meta.csv", header, [row])
    if dump_test_csv:
        rows = [
            [_fmt(v) for v in test_data.features[i]] + [_fmt(test_data.targets[i])]
            for i in range(len(test_data))
        ]
        _write_rows(dump_test_csv, None, rows)
    return report


def cmd_predict(model_in, data_csv, out_csv, has_header: bool = False) -> None:
    model = forest_mod.load(model_in)
    header, matrix = load_matrix_csv(data_csv, has_header=has_header)
    d = model.meta.dim
    if matrix.shape[0] > 0:
        if matrix.shape[1] == d:
            feats = matrix
        elif matrix.shape[1] == d + 1:
            feats = matrix[:, :d]
        else:
            raise ValidationError(
                f"{data_csv}: rows have {matrix.shape[1]} columns, model expects "
                f"{d} features (or {d + 1} with a target)"
            )
        preds = forest_mod.predict_batch(model, feats)
    else:
        preds = np.empty(0)
    out_header = header + ["prediction"] if header is not None else None
    rows = [
        [_fmt(v) for v in matrix[i]] + [_fmt(preds[i])] for i in range(matrix.shape[0])
    ]
    _write_rows(out_csv, out_header, rows)


def cmd_evaluate(model_in, data_csv, has_header: bool = False) -> float:
    model = forest_mod.load(model_in)
    data = load_csv(data_csv, has_header=has_header)
    if data.dim != model.meta.dim:
        raise ValidationError(
            f"{data_csv}: has {data.dim} features, model expects {model.meta.dim}"
        )
    return mse(forest_mod.predict_batch(model, data.features), data.targets)


def cmd_synth(kind: str, n: int, noise_sd: float, seed: int, out_csv) -> None:
    if kind != "sin":
        raise ValidationError(f"unknown synthetic benchmark {kind!r}")
    x, y = make_sin_data(n, noise_sd, seed)
    rows = [[_fmt(x[i]), _fmt(y[i])] for i in range(n)]
    _write_rows(out_csv, None, rows)


def cmd_bench(
    grid: dict,
    out_table,
    data_csv=None,
    has_header: bool = False,
    synth_kind=None,
    synth_n: int = 10000,
    synth_noise_sd: float = 0.2,
    repeats: int = 10,
    seed: int = 0,
    base_params: HyperParams | None = None,
    test_fraction: float = 0.3,
    workers: int | None = None,
) -> list:
    """One row per (trees, cells, candidates, pro) grid point, averaged over seeds."""
    if (data_csv is None) == (synth_kind is None):
        raise ValidationError("bench needs exactly one of a data CSV or a synth spec")
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    base = base_params if base_params is not None else HyperParams()
    fixed_data = load_csv(data_csv, has_header=has_header) if data_csv else None

    header = [
        "trees",
        "cells",
        "candidates",
        "pro",
        "repeats",
        "mse_mean",
        "mse_std",
        "time_mean",
        "time_std",
        "n_train",
        "n_test",
        "error",
    ]
    rows = []
    combos = itertools.product(grid["trees"], grid["cells"], grid["candidates"], grid["pro"])
    for trees, cells, candidates, pro in combos:
        errs, times = [], []
        n_train = n_test = 0
        failure = ""
        for r in range(repeats):
            run_seed = seed + r
            try:
                if fixed_data is not None:
                    data = fixed_data
                else:
                    x, y = make_sin_data(synth_n, synth_noise_sd, run_seed)
                    data = Dataset(x[:, None], y)
                params = HyperParams(
                    **{
                        **{f.name: getattr(base, f.name) for f in fields(HyperParams)},
                        "trees": trees,
                        "cells": cells,
                        "candidates": candidates,
                        "pro": pro,
                        "master_seed": run_seed,
                    }
                )
                params.validate()
                tr, te = train_test_split(
                    data, test_fraction, RandomStream(run_seed).child(rng.SPLIT)
                )
                t0 = time.perf_counter()
                model = forest_mod.train(tr, params, workers=workers)
                times.append(time.perf_counter() - t0)
                errs.append(mse(forest_mod.predict_batch(model, te.features), te.targets))
                n_train, n_test = len(tr), len(te)
            except Exception as exc:  # record the row, keep sweeping
                failure = f"{type(exc).__name__}: {exc}"
                break
        if errs:
            row = [
                trees,
                cells,
                candidates,
                repr(pro),
                len(errs),
                _fmt(np.mean(errs)),
                _fmt(np.std(errs)),
                _fmt(np.mean(times)),
                _fmt(np.std(times)),
                n_train,
                n_test,
                failure,
            ]
        else:
            row = [trees, cells, candidates, repr(pro), 0, "", "", "", "", "", "", failure]
        rows.append(row)
    _write_rows(out_table, header, rows)
    return rows


def cmd_grid_export(model_in, out_csv, resolution: int, ranges=None) -> None:
    """Predictions over a regular grid, rows sorted lexicographically."""
    model = forest_mod.load(model_in)
    d = model.meta.dim
    if d > 2:
        raise ValidationError(f"grid export supports 1-d or 2-d models, got d={d}")
    if resolution < 1:
        raise ValidationError("resolution must be >= 1")
    if ranges is None:
        ranges = [
            (float(model.meta.root_lower[k]), float(model.meta.root_upper[k]))
            for k in range(d)
        ]
    if len(ranges) != d:
        raise ValidationError(f"need {d} axis ranges, got {len(ranges)}")
    axes = []
    for lo, hi in ranges:
        if not lo < hi:
            raise ValidationError(f"bad axis range {lo}:{hi}")
        axes.append(np.linspace(lo, hi, resolution) if resolution > 1 else np.array([lo]))
    pts = np.array(list(itertools.product(*axes)))
    preds = forest_mod.predict_batch(model, pts)
    header = [f"x{k}" for k in range(d)] + ["prediction"]
    rows = [[_fmt(v) for v in pts[i]] + [_fmt(preds[i])] for i in range(pts.shape[0])]
    _write_rows(out_csv, header, rows)


# -- click wiring --------------------------------------------------------------


def _merge_params(config, flag_values: dict) -> HyperParams:
    params = HyperParams()
    if config:
        params = hyperparams_from_mapping(parse_config_file(config), params)
    updates = {k: v for k, v in flag_values.items() if v is not None}
    if updates:
        params = hyperparams_from_mapping(updates, params)
    return params


def _param_options(fn):
    opts = [
        click.option("--config", type=str, default=None, help="key=value config file"),
        click.option("--trees", type=int, default=None),
        click.option("--cells", type=int, default=None),
        click.option("--candidates", type=int, default=None),
        click.option("--pro", type=float, default=None),
        click.option("--votes", type=int, default=None),
        click.option("--lambda", "lambda_", type=float, default=None, help="split penalty"),
        click.option(
            "--leaf-model", type=click.Choice(["constant", "linear", "gaussian"]), default=None
        ),
        click.option("--vacancy-fill", type=click.Choice(["mean", "one_nn"]), default=None),
        click.option(
            "--geometry", type=click.Choice(["axis_parallel", "oblique"]), default=None
        ),
        click.option(
            "--scoring", type=click.Choice(["penalized_risk", "holdout"]), default=None
        ),
        click.option("--holdout-fraction", type=float, default=None),
        click.option("--c-grid", type=str, default=None, help="comma-separated C values"),
        click.option("--gamma-grid", type=str, default=None, help="comma-separated gamma values"),
        click.option("--min-leaf-for-model", type=int, default=None),
        click.option("--pure/--no-pure", "pure", default=None, help="uniform stage-two leaf choice"),
        click.option("--seed", type=int, default=None, help="master seed"),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _collect_params(kwargs) -> HyperParams:
    mapping = {
        "trees": kwargs.pop("trees"),
        "cells": kwargs.pop("cells"),
        "candidates": kwargs.pop("candidates"),
        "pro": kwargs.pop("pro"),
        "votes": kwargs.pop("votes"),
        "penalty": kwargs.pop("lambda_"),
        "leaf_model": kwargs.pop("leaf_model"),
        "vacancy_fill": kwargs.pop("vacancy_fill"),
        "geometry": kwargs.pop("geometry"),
        "scoring": kwargs.pop("scoring"),
        "holdout_fraction": kwargs.pop("holdout_fraction"),
        "c_grid": kwargs.pop("c_grid"),
        "gamma_grid": kwargs.pop("gamma_grid"),
        "min_leaf_for_model": kwargs.pop("min_leaf_for_model"),
        "pure": kwargs.pop("pure"),
        "master_seed": kwargs.pop("seed"),
    }
    params = _merge_params(kwargs.pop("config"), mapping)
    params.validate()
    return params


@click.group()
def cli():
    """Two-stage best-scored random forest regression."""


@cli.command("train")
@click.argument("data_csv")
@click.argument("model_out")
@_param_options
@click.option("--test-fraction", type=float, default=0.3, show_default=True)
@click.option("--has-header", is_flag=True, default=False)
@click.option("--workers", type=int, default=None, help="max concurrent tasks")
@click.option("--dump-test-csv", type=str, default=None, help="write the held-out rows here")
def _train_cmd(data_csv, model_out, test_fraction, has_header, workers, dump_test_csv, **kwargs):
    """Train on DATA_CSV (target last column) and save the model to MODEL_OUT."""
    params = _collect_params(kwargs)
    report = cmd_train(
        data_csv,
        model_out,
        params,
        test_fraction=test_fraction,
        has_header=has_header,
        workers=workers,
        dump_test_csv=dump_test_csv,
    )
    click.echo(report.to_text(), nl=False)


@cli.command("predict")
@click.argument("model_in")
@click.argument("data_csv")
@click.argument("out_csv")
@click.option("--has-header", is_flag=True, default=False)
def _predict_cmd(model_in, data_csv, out_csv, has_header):
    """Append a prediction column to DATA_CSV rows (features only, or with target)."""
    cmd_predict(model_in, data_csv, out_csv, has_header=has_header)


@cli.command("evaluate")
@click.argument("model_in")
@click.argument("data_csv")
@click.option("--has-header", is_flag=True, default=False)
def _evaluate_cmd(model_in, data_csv, has_header):
    """Print the test MSE of the model on DATA_CSV (target last column)."""
    value = cmd_evaluate(model_in, data_csv, has_header=has_header)
    click.echo(f"test_mse={value!r}")


@cli.command("synth")
@click.argument("out_csv")
@click.option("--kind", type=click.Choice(["sin"]), default="sin", show_default=True)
@click.option("--n", type=int, default=50000, show_default=True)
@click.option("--noise-sd", type=float, default=0.2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def _synth_cmd(out_csv, kind, n, noise_sd, seed):
    """Write a synthetic benchmark CSV (x, y)."""
    cmd_synth(kind, n, noise_sd, seed, out_csv)


@cli.command("bench")
@click.argument("out_table")
@click.option("--data", "data_csv", type=str, default=None, help="CSV dataset")
@click.option("--has-header", is_flag=True, default=False)
@click.option("--synth", "synth_kind", type=click.Choice(["sin"]), default=None)
@click.option("--n", "synth_n", type=int, default=10000, show_default=True)
@click.option("--noise-sd", "synth_noise_sd", type=float, default=0.2, show_default=True)
@click.option("--trees", type=str, default="50", show_default=True, help="comma list")
@click.option("--cells", type=str, default="20", show_default=True, help="comma list")
@click.option("--candidates", type=str, default="10", show_default=True, help="comma list")
@click.option("--pro", type=str, default="0.5", show_default=True, help="comma list")
@click.option("--repeats", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--test-fraction", type=float, default=0.3, show_default=True)
@click.option("--workers", type=int, default=None)
def _bench_cmd(
    out_table,
    data_csv,
    has_header,
    synth_kind,
    synth_n,
    synth_noise_sd,
    trees,
    cells,
    candidates,
    pro,
    repeats,
    seed,
    test_fraction,
    workers,
):
    """Sweep a (trees, cells, candidates, pro) grid; one averaged row per point."""
    grid = {
        "trees": [int(v) for v in trees.split(",") if v.strip()],
        "cells": [int(v) for v in cells.split(",") if v.strip()],
        "candidates": [int(v) for v in candidates.split(",") if v.strip()],
        "pro": [float(v) for v in pro.split(",") if v.strip()],
    }
    cmd_bench(
        grid,
        out_table,
        data_csv=data_csv,
        has_header=has_header,
        synth_kind=synth_kind,
        synth_n=synth_n,
        synth_noise_sd=synth_noise_sd,
        repeats=repeats,
        seed=seed,
        test_fraction=test_fraction,
        workers=workers,
    )


@cli.command("grid-export")
@click.argument("model_in")
@click.argument("out_csv")
@click.option("--resolution", type=int, required=True)
@click.option(
    "--range",
    "ranges",
    type=str,
    multiple=True,
    help="axis range lo:hi, repeat per dimension (defaults to the training box)",
)
def _grid_export_cmd(model_in, out_csv, resolution, ranges):
    """Export model predictions over a regular 1-d or 2-d grid."""
    parsed = None
    if ranges:
        parsed = []
        for spec in ranges:
            try:
                lo, hi = spec.split(":")
                parsed.append((float(lo), float(hi)))
            except ValueError:
                raise ValidationError(f"bad --range {spec!r}, expected lo:hi") from None
    cmd_grid_export(model_in, out_csv, resolution, parsed)


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(EXIT_USAGE)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        sys.exit(EXIT_USAGE)
    except click.ClickException as exc:
        exc.show()
        sys.exit(EXIT_USAGE)
    except (DataFormatError, ValidationError, ModelFormatError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    except NumericError as exc:
        click.echo(f"numeric error: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    except OSError as exc:
        click.echo(f"i/o error: {exc}", err=True)
        sys.exit(EXIT_IO)
    sys.exit(0)


if __name__ == "__main__":
    main()
