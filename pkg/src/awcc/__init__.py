"""Weather-adaptive crowd counting toolkit."""

from .config import RunConfig
from .data import (
    CropPair,
    CrowdSample,
    SampleDescriptor,
    derive_rng,
    parse_annotations,
    resize_guard,
    sample_crop_pair,
    transform_points,
)
from .evaluation import (
    EvalReport,
    QueryGallery,
    build_query_gallery,
    evaluate_dataset,
    export_density,
    infer_count,
    load_density,
    mae_mse,
    probe_weather_neighbors,
)
from .exceptions import (
    AnnotationError,
    CheckpointError,
    ConfigError,
    DataError,
    NumericalError,
)
from .losses import (
    LossConfig,
    PosteriorField,
    bayesian_count_loss,
    build_posterior_field,
    compact_prototype_loss,
    contrastive_loss,
    cosine_similarity_flat,
    total_loss,
)
from .model import (
    CrowdCounter,
    DensityMap,
    ModelConfig,
    WeatherBank,
    WeatherQueries,
    init_model,
    label_conditioned_queries,
    load_backbone_weights,
    synthesize_weather_queries,
)
from .training import (
    NegativeQueue,
    StepReport,
    TrainState,
    init_train_state,
    load_checkpoint,
    push_negative,
    run_training,
    save_checkpoint,
    train_step,
)

__version__ = "0.1.0"
