"""
Desk-scale multimodal multi-task adapting for frozen video-text dual encoders
"""

from .adapters import (
    AdapterConfig,
    AdapterPlacement,
    AdapterRegistry,
    TEDAdapter,
    TextAdapter,
    install_adapters,
    ted_forward,
    ted_temporal_difference,
    ted_temporal_enhance,
    text_adapter_forward,
)
from .decoder import (
    CMLMBlock,
    HeadConfig,
    LabelSet,
    MultiTaskLoss,
    SimilarityMatrix,
    aggregate_losses,
    cmc_loss,
    cmlm_forward,
    cmlm_loss,
    contrastive_loss,
    contrastive_similarities,
    vc_forward_loss,
    zero_shot_predict,
)
from .encoders import (
    EncoderConfig,
    FrameFeatures,
    JointEmbedding,
    VideoClip,
    patchify_and_embed,
    project_and_pool,
    project_text,
    text_encoder_forward,
    video_encoder_forward,
)
from .exceptions import (
    ConfigurationError,
    ContractError,
    DimensionError,
    FormatError,
    M2ClipError,
    NonFiniteError,
)
from .gradcheck import GradCheckReport, finite_difference_check, perturb_parameters
from .model import CMLMConfig, M2Clip
from .optim import SGD, Adam, build_optimizer
from .tensor import ComputationTape, Parameter, Tensor, backward
from .tokenizer import TokenSequence, Vocabulary, detokenize, tokenize

__version__ = "0.1.0"
__all__ = [
    "Adam",
    "AdapterConfig",
    "AdapterPlacement",
    "AdapterRegistry",
    "CMLMBlock",
    "CMLMConfig",
    "ComputationTape",
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "EncoderConfig",
    "FormatError",
    "FrameFeatures",
    "GradCheckReport",
    "HeadConfig",
    "JointEmbedding",
    "LabelSet",
    "M2Clip",
    "M2ClipError",
    "MultiTaskLoss",
    "NonFiniteError",
    "Parameter",
    "SGD",
    "SimilarityMatrix",
    "TEDAdapter",
    "Tensor",
    "TextAdapter",
    "TokenSequence",
    "VideoClip",
    "Vocabulary",
    "aggregate_losses",
    "backward",
    "build_optimizer",
    "cmc_loss",
    "cmlm_forward",
    "cmlm_loss",
    "contrastive_loss",
    "contrastive_similarities",
    "detokenize",
    "finite_difference_check",
    "install_adapters",
    "patchify_and_embed",
    "perturb_parameters",
    "project_and_pool",
    "project_text",
    "ted_forward",
    "ted_temporal_difference",
    "ted_temporal_enhance",
    "text_adapter_forward",
    "text_encoder_forward",
    "tokenize",
    "vc_forward_loss",
    "video_encoder_forward",
    "zero_shot_predict",
]
