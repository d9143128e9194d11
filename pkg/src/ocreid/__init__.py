"""Occluded cloth-changing person re-identification at desk scale."""
from .data import (
    AugmentConfig,
    BatchPlan,
    DatasetIndex,
    SampleRecord,
    SyntheticSpec,
    augment,
    generate_synthetic_dataset,
    load_dataset,
    make_pk_sampler,
)
from .estimator import OC4ReID
from .evaluation import apply_protocol, cmc_map, compute_embeddings, distance_matrix
from .losses import clothes_adversarial, clothes_ce, identity_ce, part_mean_distance, prt_loss, total_loss
from .model import T2MGSNet, screen_and_embed
from .occlusion import OcclusionConfig, Occluder, build_occluded_dataset, fuse_occlusion, select_component, soften_mask
from .training import TrainConfig, evaluate, export_metrics, sweep, toy_config, train

__version__ = "0.1.0"
