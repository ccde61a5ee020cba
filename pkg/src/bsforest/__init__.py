"""Two-stage best-scored random forest regression.

Feature space is partitioned twice: stage one splits it into cells by an
adaptive random rule (parallelization unit), stage two grows a purely
random tree per cell, picking the best of k candidates per cell under a
validation or penalized-risk score.  Forest predictions average T such
parent trees.  Training is deterministic for a fixed master seed,
regardless of worker count.
"""

from .core import (
    BsforestError,
    DataFormatError,
    Dataset,
    HyperParams,
    ModelFormatError,
    NumericError,
    Sample,
    ValidationError,
    hyperparams_from_mapping,
    load_csv,
    max_splits,
    mse,
    parse_config_file,
    penalized_score,
    train_test_split,
)
from .forest import (
    Forest,
    TrainingMeta,
    load,
    per_parent_predictions,
    predict,
    predict_batch,
    resolve_workers,
    save,
    train,
)
from .leafmodel import (
    ConstantModel,
    KernelModel,
    LinearModel,
    ModelSearchSpec,
    fit_constant,
    fit_leaf,
    predict_leaf,
    predict_leaf_batch,
    solve_lssvm,
)
from .partition import (
    AxisBox,
    AxisSplit,
    Cell,
    HyperplaneMissError,
    ObliqueSplit,
    PartitionTree,
    Polytope,
    apply_axis_split,
    apply_oblique_split,
    build_stage_one,
    build_stage_two,
    choose_leaf_adaptive,
    choose_leaf_uniform,
    root_box_for,
    split_budget,
)
from .rng import RandomStream
from .tree import (
    ChildTree,
    ParentTree,
    TrainContext,
    best_scored,
    build_candidate,
    build_child,
    build_parent,
    fill_vacancies,
    predict_parent,
    score_candidate,
)

__version__ = "0.1.0"
