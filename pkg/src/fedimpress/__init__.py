"""Federated learning simulator with zero-shot handling of new classes.

Clients with heterogeneous label sets and architectures exchange softmax
score tables over a shared public dataset. When clients announce classes
nobody has seen, the server synthesizes anonymized data impressions from
their last-layer weights, clusters them with k-medoids and extends the
public dataset and label set.
"""

from .clustering import (
    ClusterAssignment,
    PointSet,
    kmedoids,
    pca_project,
    representative_points,
    select_num_clusters,
    silhouette_score,
)
from .data import (
    Dataset,
    LabelRegistry,
    PublicDataset,
    apply_injection,
    augment_public,
    generate_synthetic_dataset,
    load_feature_file,
    partition_round,
    save_feature_file,
)
from .errors import (
    ConfigurationError,
    DegenerateWeightsError,
    FedImpressError,
    InputError,
    LabelError,
    ParseError,
    SynthesisDivergenceError,
)
from .federation import (
    GlobalState,
    RunResult,
    compute_alpha,
    global_update_choice1,
    global_update_choice2,
    local_round,
    local_update_choice1,
    run,
)
from .impressions import (
    DataImpressionBatch,
    SynthesisConfig,
    average_impressions,
    class_similarity_matrix,
    concentration_vector,
    impressions_for_class,
    sample_softmax,
    synthesize_impressions,
)
from .nn import (
    Classifier,
    ModelSpec,
    ScoreTable,
    TrainConfig,
    accuracy,
    build_classifier,
    forward,
    input_gradient,
    last_layer_weights,
    train,
)
from .scenario import ScenarioConfig, load_bundled, load_scenario, validate_scenario

__version__ = "0.1.0"
