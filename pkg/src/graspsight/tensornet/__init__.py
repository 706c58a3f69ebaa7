"""Small numpy neural-network engine with reverse-mode autodiff."""

from .checkpoint import (BadMagicError, CheckpointError, ShapeMismatchError, TruncatedCheckpointError,
                         VersionMismatchError, load_checkpoint, load_into, save_checkpoint)
from .gradcheck import grad_check
from .network import (Conv2d, Dense, Flatten, MaxPool2x2, Network, ReLU, Sigmoid, Upsample2x,
                      backward)
from .optim import Adam, OptimizerState, adam_step
from .tensor import (GraphError, ShapeError, Tensor, add, bce_loss, concat_channels, conv2d, dense,
                     flatten, maxpool2x2, mean_all, mse_loss, mul, relu, reshape, sigmoid, sub,
                     sum_all, take_channels, tile_vector_to_channels, upsample2x)
