"""Selective state-space multimodal encoders with Gram-determinant alignment
and low-rank adaptation for missing modalities."""

from .errors import *  # noqa: F401,F403
from .tensor import Tensor, backward, grad_check, no_grad
from .ssm import zoh_discretize, selective_scan, mamba_block_forward, encode_modality
from .gram import l2_normalize, gram_matrix, gram_det_loss
from .lora import lora_init, lora_forward, merge_adapter, build_freeze_plan, trainable_fraction
from .model import ModalitySpec, ModelConfig, GramMambaModel, forward_full, forward_partial, total_loss

__version__ = "0.1.0"
