"""Multi-source conformal regression with non-disclosed interval aggregation."""

from .aggregation import CombinedInterval, combine, ideal_shrink, ndcp_predict
from .conformal import (
    CcpModel,
    IcpModel,
    PredictionInterval,
    PredictorConfig,
    ccp_interval,
    fit_ccp,
    fit_icp,
    fit_predictor,
    icp_interval,
    predict_interval,
    score,
)
from .data import (
    CsvFormatError,
    Dataset,
    Example,
    PartitionPlan,
    load_csv,
    partition,
    train_test_split,
)
from .experiment import (
    ExperimentConfig,
    ExperimentReport,
    MetricsRow,
    efficiency,
    emit_report,
    run_experiment,
    validity,
)
from .node import Aggregator, AggregateError, NodeServer, WireRecorder, aggregate_predict, serve
from .regressors import (
    GridSearchSpec,
    KernelRidge,
    LinearModel,
    RandomForest,
    SmoConvergenceError,
    SupportVectorRegressor,
    fit_kernel_ridge,
    fit_linear,
    fit_random_forest,
    fit_svr,
    grid_search,
    make_regressor,
)

__version__ = "0.1.0"
