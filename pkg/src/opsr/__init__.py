"""Operator-learning super-resolution of PDE solution fields.

Generates high-resolution KdV-Burgers and Poisson solution snapshots, pools
them down to low resolution, trains branch/trunk operator models to
reconstruct the originals, and benchmarks against cubic-spline interpolation
under a relative L2 metric.
"""

from .fields import (
    Field1D,
    Field2D,
    Grid1D,
    Grid2D,
    l2_norm,
    make_grid_1d,
    relative_l2_error,
)
from .pooling import PooledSample, PoolingSpec, pool, pool_avg, pool_max, pooled_coords
from .simulate import (
    KdvbParams,
    KdvbSolverConfig,
    PoissonInstance,
    kdvb_initial_condition,
    sample_kdvb_params,
    sample_poisson_source,
    solve_kdvb,
    solve_poisson,
)
from .spline import (
    Spline1D,
    bicubic_reconstruct_2d,
    eval_spline_1d,
    fit_cubic_spline_1d,
    spline_reconstruct_1d,
)
from .deeponet import (
    DeepONet1DConfig,
    DeepONet2DConfig,
    DeepONetModel,
    build_deeponet_1d,
    build_deeponet_2d,
    forward,
    load_checkpoint,
    predict_field,
    save_checkpoint,
)
from .datasets import Dataset, SRPair, generate_dataset, read_dataset, write_dataset
from .training import TrainConfig, train
from .report import (
    EvalRecord,
    EvalReport,
    evaluate_baseline,
    evaluate_model,
    sweep,
    write_field_pgm,
    write_report_csv,
)

__version__ = "0.1.0"
