"""Reverse-mode autodiff core: tensors, primitives, optimizers, layers."""
from .tensor import (
    LOG_FLOOR, Tape, Tensor, add, as_tensor, backward, concat, conv2d, div, exp,
    getitem, grad_reverse, log, matmul, mean, mul, neg, no_grad, power, relu,
    reshape, sigmoid, softmax, sqdist_columns, sub, sym_inv_sqrt, tanh,
    transpose, tsum, upsample_bilinear,
)
from .optim import SGD, Adam, Optimizer, make_optimizer
from .nn import (
    Classifier, Conv2d, Linear, MLP, Module, Whitener, WHITEN_FLOOR, batch_whiten,
    build_network, frozen, parameters_of,
)
from .gradcheck import check_gradients, numeric_grad, relative_error
