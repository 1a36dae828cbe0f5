"""serverlens: server power, throughput, and efficiency models from benchmark data."""

from .bundle import (
    BundleIntegrityError,
    BundleVersionError,
    Leaderboard,
    LearnerEntry,
    ModelBundle,
    load_bundle,
    save_bundle,
)
from .dataset import (
    LEVELS,
    ColumnMapping,
    DesignMatrix,
    Diagnostic,
    FeatureSchema,
    ServerRecord,
    SyntheticSpec,
    TargetKind,
    build_design_matrix,
    date_to_ordinal,
    generate_synthetic,
    ingest_results_csv,
    parse_cache_fields,
    parse_memory_field,
    parse_results_csv,
    parse_storage_field,
    read_canonical_csv,
    write_canonical_csv,
)
from .evaluation import (
    ImportanceReport,
    MetricsReport,
    PredictionSet,
    compute_metrics,
    maape,
    mape,
    permutation_importance,
    r_squared,
    rmse,
)
from .hpo import (
    SEARCH_SPACES,
    SearchSpace,
    TrialHistory,
    bayes_optimize,
    expected_improvement,
    sample_hyperparams,
)
from .learners import (
    FitError,
    TrainedModel,
    expand_polynomial,
    fit_elastic_net,
    fit_ffn,
    fit_gbt,
    fit_gp,
    fit_random_forest,
    predict,
)
from .pipeline import (
    PROFILES,
    Eq1Report,
    PipelineConfig,
    PipelineError,
    PredictionCurves,
    ProspectiveGrid,
    consistency_check_eq1,
    predict_targets,
    prospective_experiment,
    run_training,
    select_best,
)
from .preprocess import (
    ImputerModel,
    ScalerModel,
    apply_imputer,
    apply_scaler,
    fit_imputer,
    fit_scaler,
    invert_scaler,
)
from .split import SplitIndices, SplitScheme, random_server_split, time_series_split

__version__ = "0.1.0"
