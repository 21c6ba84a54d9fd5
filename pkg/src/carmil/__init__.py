"""Context-aware regularization for multiple-instance survival models.

A graph autoencoder sits between the tile features and the MIL head; a
reconstruction loss on the tile graph blends with the survival loss so
the learned embeddings keep the slide's spatial structure. A directed
DeltaCon similarity quantifies how much spatial context any per-tile
representation retains.
"""

from .autodiff import DiffNode, ParamStore, backward, finite_difference_check
from .data import SynthConfig, SynthSlide, as_dataset, generate, ingest, write_dataset
from .deltacon import DeltaConConfig, DeltaConReport, deltacon, deltacon_s, degree_pair
from .errors import CarmilError, ConfigError, DataError, SurvivalDataError
from .gae import SpatialDecoder, SpatialEncoder, decode, encode, gcn_forward, preprocess_adjacency
from .graphs import (
    SpatialGraph,
    TileSet,
    embedding_adjacency,
    gaussian_kernel,
    joint_normalize,
    knn_adjacency,
    mean_neighbor_distance,
    rewire_edges,
    shuffle_offdiagonal,
    spatial_adjacency,
)
from .losses import (
    LossBlendConfig,
    SurvivalLabel,
    car_loss,
    concordance_index,
    cox_loss,
    edge_auc,
    total_loss,
)
from .mil import HEAD_VARIANTS, build_head
from .model import CarmilModel, ModelConfig
from .optim import Adam
from .training import (
    Bag,
    CvPlan,
    EnsembleModel,
    ExperimentReport,
    TrainConfig,
    ablate_shuffle,
    evaluate_context_awareness,
    make_bags,
    make_cv_plan,
    run_nested_cv,
    train_ensemble,
    train_one,
)

__version__ = "0.1.0"
