"""Single-block Transformer in numpy, with exact backprop, optimizers, and an
explicit construction that approximates continuous functions on a box."""

from .backprop import backward, finite_diff_grad, forward_cached, grad_check, loss_and_grad
from .construct import (
    Box, CapacityExceeded, CertifiedModel, Partition, build_lookup_transformer, construct_to_tolerance,
    estimate_sup_error, partition_domain, sample_representatives, select_sharpness,
)
from .losses import Loss, cross_entropy, mse
from .optim import AdamState, TrainConfig, adam_step, gd_step, sgd_minibatch_grad, train_loop
from .serialize import emit_csv, load_model, save_model
from .transformer import (
    BlockParams, FfnParams, HeadParams, MhaParams, attention_weights, init_block_params,
    multi_head_attention, position_wise_ffn, positional_encoding, self_attention, transformer_block,
)

__version__ = "0.1.0"
