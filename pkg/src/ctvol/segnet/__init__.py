"""From-scratch DeepLabV3+ style segmentation network in numpy."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .gradcheck import LossProbe, ModelWithLoss, UpsampleProbe, grad_check
from .layers import (
    ASPP,
    ChannelMismatch,
    Conv2d,
    ConvParams,
    EmptyRates,
    GroupNorm,
    NonPositiveOutputSize,
    ResidualBlock,
    SegNetError,
    ShapeMismatch,
    aspp,
    bilinear_upsample,
    conv2d_backward,
    conv2d_forward,
    residual_block,
)
from .loss import loss, loss_and_grad, loss_terms, sigmoid
from .model import DeepLabV3Plus, ModelConfig, build_model, model_forward, tiny_config
from .train import NonFiniteLoss, TrainState, train_step

__all__ = [
    "ASPP", "ChannelMismatch", "Checkpoint", "Conv2d", "ConvParams", "DeepLabV3Plus", "EmptyRates",
    "GroupNorm", "LossProbe", "ModelConfig", "ModelWithLoss", "NonFiniteLoss", "NonPositiveOutputSize",
    "ResidualBlock", "SegNetError", "ShapeMismatch", "TrainState", "UpsampleProbe", "aspp",
    "bilinear_upsample", "build_model", "conv2d_backward", "conv2d_forward", "grad_check",
    "load_checkpoint", "loss", "loss_and_grad", "loss_terms", "model_forward", "residual_block",
    "save_checkpoint", "sigmoid", "tiny_config", "train_step",
]
