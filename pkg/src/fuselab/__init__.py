"""fuselab: a desk-scale testbed for dual-encoder conditioning fusion.

Two frozen toy text encoders feed a trainable cross-attention adapter whose
output is concatenated onto the text features and consumed by a small
cross-attention denoiser. The package exists to check the algebra of that
fusion (including where the concatenated and decomposed attention forms
disagree), the loss definitions, and the ablation structure by property
tests and pinned toy-scale regressions.
"""

from .config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config_text
from .dataset import Example, color_accuracy, dataset_digest, eval_prompts, make_dataset
from .denoiser import AttentionMaps, DenoiserParams, denoise, init_denoiser_params
from .diffusion import NoiseSchedule, adam_step, cfg_combine, ddim_sample, q_sample, reg_loss
from .encoders import ConditioningPair, EncoderPair, Vocabulary, default_word_list, tokenize
from .fusion import (
    AdapterParams,
    AttnProjections,
    FusedConditioning,
    FusionVariant,
    MlpParams,
    adapter_attention,
    baseline_conditioning,
    conditioned_cross_attention,
    cross_attention,
    fuse,
    fusion_variant_forward,
    variant_params,
)
from .prompts import AttributeEntityPair, Lexicon, default_lexicon, parse
from .rng import PhiloxStream
from .tensor import (
    GradcheckReport,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    concat_rows,
    gradcheck,
    linear,
    matmul,
    mse,
    softmax_rows,
    split_rows,
    tsum,
    zero_grads,
)
from .train import Trainer, TrainingDiverged

__version__ = "0.1.0"
