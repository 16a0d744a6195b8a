"""
Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable primitive computes its forward value eagerly and, when at
least one input requires a gradient, appends a record to the active ``Tape``.
``backward`` walks the tape in reverse order and accumulates gradients into
the leaf tensors (parameters) that requested them.

Tapes are thread-local: each thread records onto its own default tape unless
a ``Tape`` is entered explicitly as a context manager, so replicate runs can
train concurrently without sharing state.
"""

import contextlib
import threading
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, NumericError, TapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_local = threading.local()


class Node(NamedTuple):
    tape: "Tape"
    index: int


class _Record(NamedTuple):
    op: str
    inputs: tuple
    backward: Callable
    shape: tuple


class Tape:
    """Ordered log of primitive applications for one forward/backward pass.

    Use as a context manager to make it the active tape for the current
    thread::

        with Tape() as tape:
            loss = model_loss(...)
            tape.backward(loss)
    """

    def __init__(self):
        self.records: list = []
        self.consumed = False
        self._outer = None

    def __enter__(self):
        self._outer = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._outer
        self._outer = None
        return False

    def __len__(self):
        return len(self.records)

    def record(self, op, inputs, backward, shape) -> Node:
        if self.consumed:
            raise TapeError("cannot record onto a tape that has already been differentiated")
        self.records.append(_Record(op, tuple(inputs), backward, shape))
        return Node(self, len(self.records) - 1)

    def entries(self):
        """(op, input node ids, output node id) for every record, in order."""
        out = []
        for idx, rec in enumerate(self.records):
            ids = tuple(
                inp.node.index if inp.node is not None and inp.node.tape is self else None
                for inp in rec.inputs
            )
            out.append((rec.op, ids, idx))
        return out

    def clear(self):
        self.records = []
        self.consumed = False

    def backward(self, loss: "Tensor"):
        if loss.values.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.node.tape is not self:
            raise TapeError("loss was not recorded on this tape (detached or produced elsewhere)")
        if self.consumed:
            raise TapeError("backward already ran on this tape; clear it before reusing")

        grads: list = [None] * (loss.node.index + 1)
        grads[loss.node.index] = np.ones(loss.shape)
        for idx in range(loss.node.index, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            grads[idx] = None
            rec = self.records[idx]
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is not None:
                    if inp.node.tape is not self:
                        continue
                    j = inp.node.index
                    grads[j] = gi if grads[j] is None else grads[j] + gi
                elif inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64)
                else:
                    inp.grad += gi
        self.records = []
        self.consumed = True


def active_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = getattr(_local, "default", None)
        if tape is None or tape.consumed:
            tape = Tape()
            _local.default = tape
    return tape


def grad_enabled() -> bool:
    return not getattr(_local, "no_grad", False)


@contextlib.contextmanager
def no_grad():
    prev = getattr(_local, "no_grad", False)
    _local.no_grad = True
    try:
        yield
    finally:
        _local.no_grad = prev


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.array(values, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, values, node=None, requires_grad=False):
        t = cls.__new__(cls)
        t.values = values
        t.requires_grad = requires_grad
        t.grad = None
        t.node = node
        t.name = None
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.values

    def item(self):
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else self.values.item()

    def detach(self):
        return Tensor._wrap(self.values)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.node is None:
            raise TapeError("tensor is not attached to a tape")
        self.node.tape.backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _emit(op: str, values: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if grad_enabled() and any(t.requires_grad for t in inputs):
        node = active_tape().record(op, inputs, backward, values.shape)
        return Tensor._wrap(values, node, True)
    return Tensor._wrap(values)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    return _emit("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    y = np.maximum(x.values, 0.0)
    return _emit("relu", y, (x,), lambda g: (g * (y > 0),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.values)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.values)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.values)
    return _emit("exp", y, (x,), lambda g: (g * y,))


def log(x, floor: Optional[float] = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first."""
    x = as_tensor(x)
    v = x.values if floor is None else np.maximum(x.values, floor)
    live = np.ones(v.shape, dtype=bool) if floor is None else x.values > floor
    return _emit("log", np.log(v), (x,), lambda g: (np.where(live, g / v, 0.0),))


# -- structural -------------------------------------------------------------


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(
                f"concat along axis {axis}: {tensors[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _emit("concat", np.concatenate([t.values for t in tensors], axis=ax), tensors, backward)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def take(x, idx) -> Tensor:
    """Indexing / slicing (``x[idx]``)."""
    x = as_tensor(x)
    shape = x.shape
    basic = _is_basic_index(idx)

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _emit("slice", np.array(x.values[idx], dtype=np.float64), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _emit("reshape", x.values.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", x.values.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


# -- reductions -------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else axis
        g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit("reduce_sum", np.asarray(x.values.sum(axis=axis, keepdims=keepdims)), (x,),
                 lambda g: (_expand_reduced(g, shape, axis, keepdims),))


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = np.asarray(x.values.mean(axis=axis, keepdims=keepdims))
    n = x.values.size // max(out.size, 1)
    return _emit("reduce_mean", out, (x,),
                 lambda g: (_expand_reduced(g / n, shape, axis, keepdims),))


# -- linear algebra and layers ----------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        if bv.ndim == 2:
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return _unbroadcast(ga, av.shape), gb
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit("matmul", av @ bv, (a, b), backward)


def same_padding(k: int):
    left = (k - 1) // 2
    return left, k - 1 - left


def conv1d(x, kernels, bias, pad: str = "valid", channels_last: bool = False) -> Tensor:
    """1-D cross-correlation (no kernel flip).

    ``x`` is ``[C_in, L]`` or ``[B, C_in, L]`` (``[L, C_in]`` / ``[B, L, C_in]``
    with ``channels_last``); ``kernels`` is ``[C_out, C_in, K]``. ``pad="same"``
    zero-pads so the output keeps length L; for even K the extra zero goes
    on the right.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    single = x.ndim == 2
    xv = x.values[None] if single else x.values
    if xv.ndim != 3 or kernels.ndim != 3:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with kernels {kernels.shape}")
    if not channels_last:
        xv = xv.transpose(0, 2, 1)
    B, L, C_in = xv.shape
    C_out, kc, K = kernels.shape
    if kc != C_in:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with kernels {kernels.shape}")
    if bias.shape != (C_out,):
        raise DimensionError(f"conv1d: bias {bias.shape} does not match kernels {kernels.shape}")
    if pad not in ("valid", "same"):
        raise ConfigurationError(f"conv1d: unknown padding mode {pad!r}")
    left, right = same_padding(K) if pad == "same" else (0, 0)
    Lp = L + left + right
    if K > Lp:
        raise DimensionError(f"conv1d: kernel length {K} exceeds padded input length {Lp}")
    if left + right:
        xp = np.zeros((B, Lp, C_in))
        xp[:, left:left + L] = xv
    else:
        xp = xv
    L_out = Lp - K + 1
    # cols[b, t, k*C_in + ci] = xp[b, t + k, ci]
    cols = np.concatenate([xp[:, k:k + L_out] for k in range(K)], axis=2).reshape(B * L_out, K * C_in)
    w2 = kernels.values.transpose(0, 2, 1).reshape(C_out, K * C_in)
    out = cols @ w2.T
    out += bias.values
    out = out.reshape(B, L_out, C_out)

    def backward(g):
        g3 = g[None] if single else g
        if not channels_last:
            g3 = g3.transpose(0, 2, 1)
        g2 = g3.reshape(B * L_out, C_out)
        gw = (g2.T @ cols).reshape(C_out, K, C_in).transpose(0, 2, 1)
        gb = g2.sum(axis=0)
        dcols = (g2 @ w2).reshape(B, L_out, K, C_in)
        dxp = np.zeros((B, Lp, C_in))
        for k in range(K):
            dxp[:, k:k + L_out] += dcols[:, :, k]
        gx = dxp[:, left:left + L]
        if not channels_last:
            gx = gx.transpose(0, 2, 1)
        return (gx[0] if single else gx), gw, gb

    if not channels_last:
        out = out.transpose(0, 2, 1)
    return _emit("conv1d", out[0] if single else out, (x, kernels, bias), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.values)):
        raise NumericError("softmax received non-finite input")
    z = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), backward)


def global_avg_pool(x, time_axis: int = -1) -> Tensor:
    """Mean over the time axis: ``[.., C, L] -> [.., C]`` (or ``[.., L, C]`` with time_axis=-2)."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[time_axis] == 0:
        raise DimensionError(f"global_avg_pool needs a non-empty time axis, got {x.shape}")
    return reduce_mean(x, axis=time_axis)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
               channel_axis: int = 1) -> Tensor:
    """Per-channel normalisation of ``[B, C, L]`` over the batch and time axes.

    ``channel_axis=-1`` accepts ``[B, L, C]``. In training mode the running
    statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 3:
        raise DimensionError(f"batch_norm expects a 3-D batch, got {x.shape}")
    xv = x.values
    ca = channel_axis % 3
    axes = tuple(i for i in range(3) if i != ca)
    bshape = [1, 1, 1]
    bshape[ca] = xv.shape[ca]
    gv = gamma.values.reshape(bshape)
    bv = beta.values.reshape(bshape)
    if training:
        if xv.shape[0] < 2:
            raise ConfigurationError("batch_norm in training mode needs a batch of at least 2")
        mu = xv.mean(axis=axes)
        xc = xv - mu.reshape(bshape)
        var = np.einsum("ijk,ijk->" + "ijk"[ca], xc, xc) / (xv.size // xv.shape[ca])
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        xc = xv - running_mean.reshape(bshape)
        var = running_var.copy()
    inv = (1.0 / np.sqrt(var + eps)).reshape(bshape)
    xhat = xc * inv
    m = xv.size // xv.shape[ca]

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        if training:
            gx = (gv * inv / m) * (m * g - gbeta.reshape(bshape) - xhat * ggamma.reshape(bshape))
        else:
            gx = g * (gv * inv)
        return gx, ggamma, gbeta

    y = xhat * gv
    y += bv
    return _emit("batch_norm", y, (x, gamma, beta), backward)


def backward(loss: Tensor):
    """Populate ``.grad`` of every leaf that contributed to ``loss``."""
    if not isinstance(loss, Tensor) or loss.node is None:
        if isinstance(loss, Tensor) and loss.values.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        raise TapeError("loss is detached from any tape")
    loss.node.tape.backward(loss)
