"""Differentiable layers: convolutional blocks, (bi-)LSTMs and the softmax head."""

from typing import Optional

import numpy as np

from . import store
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import (Tensor, as_tensor, batch_norm, concat, conv1d, matmul, relu, sigmoid,
                     softmax, tanh)


class Module:
    """Container that discovers parameters and sub-modules from its attributes."""

    _buffer_names: tuple = ()
    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key in self._buffer_names:
            yield prefix + key, getattr(self, key)
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_records(self):
        """Parameters then buffers as ``(name, array)`` pairs, in a fixed order."""
        recs = [(name, p.values) for name, p in self.named_parameters()]
        recs += [(f"buffer:{name}", b) for name, b in self.named_buffers()]
        return recs

    def load_records(self, records):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, arr in records:
            if name.startswith("buffer:"):
                target = buffers.get(name[len("buffer:"):])
            else:
                p = params.get(name)
                target = None if p is None else p.values
            if target is None:
                raise ContractError(f"unknown parameter {name!r}")
            if target.shape != arr.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} vs model {target.shape}")
            target[...] = arr

    def save(self, path):
        store.save(path, self.state_records())

    def load(self, path):
        self.load_records(store.load(path))


def glorot_uniform(rng, shape, fan_in, fan_out, name=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True, name=name)


def zeros_param(shape, name=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, channels_last=False):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = zeros_param(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.channel_axis = -1 if channels_last else 1

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, channel_axis=self.channel_axis)


class Conv1d(Module):
    def __init__(self, c_in, c_out, k, rng, pad="same", channels_last=False):
        self.kernels = glorot_uniform(rng, (c_out, c_in, k), c_in * k, c_out * k)
        self.bias = zeros_param(c_out)
        self.pad = pad
        self.channels_last = channels_last

    def forward(self, x):
        return conv1d(x, self.kernels, self.bias, self.pad, channels_last=self.channels_last)


class ConvBlock(Module):
    """conv1d ('same') -> batch norm -> optional ReLU; keeps the time length.

    Inputs are ``[B, C, L]``, or ``[B, L, C]`` when built with ``channels_last``
    (the faster layout, used inside the encoders).
    """

    def __init__(self, c_in, c_out, k, rng, activation=True, channels_last=False):
        if c_out < 1 or k < 1:
            raise ConfigurationError(f"ConvBlock needs c_out >= 1 and k >= 1, got {c_out}, {k}")
        self.conv = Conv1d(c_in, c_out, k, rng, channels_last=channels_last)
        self.bn = BatchNorm(c_out, channels_last=channels_last)
        self.activation = activation

    def forward(self, x):
        y = self.bn(self.conv(x))
        return relu(y) if self.activation else y


def conv_block_forward(x, block: ConvBlock, training: Optional[bool] = None):
    if training is not None:
        block.train(training)
    single = x.ndim == 2
    if single:
        x = as_tensor(x).reshape((1,) + x.shape)
    y = block(x)
    return y.reshape(y.shape[1:]) if single else y


class Dense(Module):
    """Affine map ``x @ W.T + b`` with ``W`` stored as ``[out, in]``."""

    def __init__(self, d_in, d_out, rng):
        self.W = glorot_uniform(rng, (d_out, d_in), d_in, d_out)
        self.b = zeros_param(d_out)

    def forward(self, x):
        return affine(x, self.W, self.b)


def affine(x, W, b):
    x = as_tensor(x)
    if x.ndim == 1:
        return (matmul(x.reshape(1, -1), W.T) + b).reshape(-1)
    return matmul(x, W.T) + b


def dense_softmax(x, W, b) -> Tensor:
    """Class probabilities ``softmax(W x + b)`` for the binary task."""
    W, b = as_tensor(W), as_tensor(b)
    if W.shape[0] != 2:
        raise ConfigurationError(f"only binary heads are supported, got {W.shape[0]} classes")
    if as_tensor(x).shape[-1] != W.shape[1]:
        raise DimensionError(f"dense_softmax: input {as_tensor(x).shape} vs weights {W.shape}")
    return softmax(affine(x, W, b), axis=-1)


class SoftmaxHead(Dense):
    def __init__(self, d_in, rng, classes=2):
        if classes != 2:
            raise ConfigurationError(f"only binary heads are supported, got {classes} classes")
        super().__init__(d_in, classes, rng)

    def forward(self, x):
        return dense_softmax(x, self.W, self.b)


GATES = ("i", "f", "o", "g")


class LstmParams(Module):
    """Per-gate weights ``W_*: [H, D + H]`` acting on ``[x; h_prev]``."""

    def __init__(self, d_in, hidden, rng):
        self.d_in = d_in
        self.hidden = hidden
        bound = 1.0 / np.sqrt(hidden)
        for gate in GATES:
            w = rng.uniform(-bound, bound, size=(hidden, d_in + hidden))
            setattr(self, f"W_{gate}", Tensor(w, requires_grad=True))
        for gate in GATES:
            init = np.ones(hidden) if gate == "f" else np.zeros(hidden)
            setattr(self, f"b_{gate}", Tensor(init, requires_grad=True))

    def stacked(self):
        W = concat([getattr(self, f"W_{g}") for g in GATES], axis=0)
        b = concat([getattr(self, f"b_{g}") for g in GATES], axis=0)
        return W, b

    def forward(self, xs, return_sequence=False):
        return lstm_sequence(xs, self, "all" if return_sequence else "last")


def _gates(z, H, c_prev):
    i = sigmoid(z[..., 0:H])
    f = sigmoid(z[..., H:2 * H])
    o = sigmoid(z[..., 2 * H:3 * H])
    g = tanh(z[..., 3 * H:4 * H])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def lstm_step(x_t, h_prev, c_prev, p: LstmParams):
    """One LSTM cell update; accepts ``[D]`` or batched ``[B, D]`` inputs."""
    x_t, h_prev, c_prev = as_tensor(x_t), as_tensor(h_prev), as_tensor(c_prev)
    if x_t.shape[-1] != p.d_in or h_prev.shape[-1] != p.hidden or c_prev.shape[-1] != p.hidden:
        raise DimensionError(
            f"lstm_step: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} "
            f"vs D={p.d_in}, H={p.hidden}")
    W, b = p.stacked()
    z = affine(concat([x_t, h_prev], axis=-1), W, b)
    return _gates(z, p.hidden, c_prev)


def lstm_sequence(xs, p: LstmParams, return_: str = "last"):
    """Fold ``lstm_step`` left to right from zero state over ``[T, D]`` or ``[B, T, D]``."""
    xs = as_tensor(xs)
    if return_ not in ("last", "all"):
        raise ConfigurationError(f"return_ must be 'last' or 'all', got {return_!r}")
    T = xs.shape[-2] if xs.ndim >= 2 else 0
    if xs.ndim < 2 or T == 0:
        raise DimensionError(f"lstm_sequence needs at least one time step, got {xs.shape}")
    if xs.shape[-1] != p.d_in:
        raise DimensionError(f"lstm_sequence: input width {xs.shape[-1]} vs D={p.d_in}")
    H, D = p.hidden, p.d_in
    W, b = p.stacked()
    # input contributions for all steps in one product
    xw = matmul(xs, W[:, :D].T) + b
    Wh = W[:, D:].T
    lead = xs.shape[:-2]
    h = Tensor(np.zeros(lead + (H,)))
    c = Tensor(np.zeros(lead + (H,)))
    hs = []
    for t in range(T):
        z = xw[..., t, :] + matmul(h.reshape((-1, H)), Wh).reshape(lead + (4 * H,))
        h, c = _gates(z, H, c)
        hs.append(h)
    if return_ == "last":
        return h
    return concat([s.reshape(lead + (1, H)) for s in hs], axis=-2)


def bilstm_sequence(xs, p_fwd: LstmParams, p_bwd: LstmParams):
    """``[h_fwd_t ; h_bwd_t]`` for every step, width 2H."""
    if p_fwd.hidden != p_bwd.hidden:
        raise DimensionError(f"bilstm: hidden sizes differ ({p_fwd.hidden} vs {p_bwd.hidden})")
    xs = as_tensor(xs)
    rev = (Ellipsis, slice(None, None, -1), slice(None))
    fwd = lstm_sequence(xs, p_fwd, "all")
    bwd = lstm_sequence(xs[rev], p_bwd, "all")[rev]
    return concat([fwd, bwd], axis=-1)
