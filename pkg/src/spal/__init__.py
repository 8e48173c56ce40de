"""Super-point based active learning for point cloud semantic segmentation."""

from .pcio import (
    Dataset,
    PointCloud,
    SynthSpec,
    benchmark_spec,
    generate_synthetic,
    load_dataset,
    export_dataset,
    split_blocks,
)
from .geomfeat import (
    GeometricFeatureSet,
    NeighborGraph,
    compute_features,
    covariance_eigenvalues,
    geometric_distance,
    geometric_features,
    knn,
)
from .superpoint import (
    AffinityGraph,
    SuperPointPartition,
    assign_majority_label,
    build_affinity,
    noise_rate,
    normalized_cut,
    normalized_cut_schedule,
)
from .model import (
    MlpModel,
    MlpSpec,
    ModelOutput,
    TrainConfig,
    augment,
    forward,
    nuclear_loss,
    nuclear_loss_gradient,
    total_loss,
    train,
)
from .acquisition import (
    AcquisitionScore,
    LabelPool,
    al_score,
    build_units,
    click_cost,
    diversity_score,
    entropy,
    oracle_label,
    pooled_feature,
    score_candidates,
    select_query,
    shape_diversity_score,
    uncertainty_score,
)
from .harness import (
    ExperimentConfig,
    Report,
    miou,
    run_experiment,
    sweep,
    transfer,
)

__version__ = "0.1.0"
