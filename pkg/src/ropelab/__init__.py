"""Desk-scale laboratory for rotary position embeddings and their extensions."""

from .rope import (
    Ntk,
    Pi,
    Rope,
    RopeConfig,
    RotaryVariant,
    Yarn,
    default_yarn_temperature,
    effective_angle,
    rotate,
    theta,
    yarn_attention_scale,
    yarn_for_context,
)
from .attention import AttentionInput, AttentionRecord, attend, last_row_distribution
from .model import (
    ModelConfig,
    TinyModel,
    TrainingDiverged,
    forward,
    generate,
    init_model,
    load_checkpoint,
    loss_and_gradients,
    save_checkpoint,
    train,
    zero_model,
)
from .tasks import SyntheticTask
from .analysis import (
    DistanceDistribution,
    EntropyReport,
    aggregate_distance_distribution,
    attention_entropy,
    entropy,
    js_divergence,
)
from .harness import (
    NeedleGrid,
    PerplexityCurve,
    build_needle_case,
    compare_variants,
    run_needle_grid,
    run_ppl_curve,
)
from .seeding import derive_seed

__version__ = "0.1.0"
