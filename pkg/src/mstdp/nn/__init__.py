from .checkpoint import CheckpointError, read_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .layers import (
    DecoderLayer,
    EncoderLayer,
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    TransformerEncoder,
    causal_mask,
    embedding_lookup,
    key_padding_mask,
    linear,
    masked_mean,
    sinusoidal_positions,
)
from .optim import Adam, adam_step, clip_grad_norm
from .params import ParameterStore
from .tensor import (
    Parameter,
    Tensor,
    concat,
    huber,
    layer_norm,
    leaky_relu,
    log_softmax,
    no_grad,
    segment_softmax,
    segment_sum,
    softmax,
    take,
)
