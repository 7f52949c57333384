"""Desk-scale action-unit intensity editing in a frozen toy latent space."""

from .config import (AU_NAMES, AU_ROLES, Config, DatasetConfig, Dims,
                     EstimatorConfig, IdentityConfig, InversionConfig,
                     LossWeights, TrainConfig, load_config, stage_seed)
from .editing import (AUConditions, DirectionMatrix, EmbeddingTriple,
                      LevelEditor, MultiLevelLatent, ShapeMismatchError,
                      apply_conditions, decode_residual, edit_latents,
                      encode_level, normalize_embedding)
from .labels import (BroadcastCodec, LabelCodec, LevelConditions,
                     decode_labels, encode_labels, label_loss)
from .estimators import (IdentityEmbedder, SiameseEstimator, embed,
                         estimate_absolute, estimate_pair, feature_taps,
                         train_estimator, train_identity_embedder)
from .training import (AUEditModel, TrainingTriplet, compute_losses,
                       forward_dual_branch, train)
from .evaluation import (MetricsReport, ablation_grid, augmentation_study,
                         eval_editing, icc31, smile_protocol)
from .annotate import AnnotationResult, annotate, make_model_generator

__version__ = "0.1.0"
