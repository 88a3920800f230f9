"""Initial-noise optimization over diffusion attention maps.

The package takes the cross-/self-attention tensors of a one-step-denoised
latent, segments the self-attention saliency map, assigns segments to subject
tokens, and minimizes attention-contrast / attention-complete / KL losses by
updating the Gaussian parameters of the initial latent.
"""

from coconolab.attention import (
    AttentionBundle,
    CrossAttentionStack,
    DegenerateMapError,
    SaliencyMap,
    SegmentSet,
    SelfAttentionTensor,
    SmoothingConfig,
    aggregate_cross_attention,
    extract_segments,
    otsu_threshold,
    principal_self_map,
    smooth_cross_attention,
    soften,
)
from coconolab.assignment import AssignmentMatrix, CostMatrix, cost_matrix, optimal_assignment
from coconolab.losses import (
    LossReport,
    LossWeights,
    PipelineConfig,
    attention_complete,
    attention_contrast,
    evaluate_pipeline,
    kl_gaussian,
    loss_gradients,
    total_loss,
)
from coconolab.metrics import MaskSet, count_distinct_segments, pairwise_overlap
from coconolab.optimizer import (
    LatentSample,
    NoiseParams,
    OptimizationResult,
    OptimizerConfig,
    finite_diff_gradient,
    init_params,
    optimize,
    step,
)
from coconolab.synthetic import ScenarioSpec, SyntheticProducer, make_producer, scenario

__version__ = "0.1.0"
