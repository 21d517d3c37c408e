from .ops import (
    add,
    attention,
    concat,
    conv1d,
    cross_entropy,
    div,
    embedding,
    exp,
    getitem,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    saturating_sigmoid,
    sigmoid,
    softmax,
    square,
    stop_gradient,
    sub,
    sum,
    tanh,
    transpose,
)
from .optim import Adam
from .random import NoiseSource, gaussian_noise, gumbel_from_uniform, gumbel_noise
from .tensor import Graph, Tensor, as_tensor, backward, current_graph, no_grad, parameter
