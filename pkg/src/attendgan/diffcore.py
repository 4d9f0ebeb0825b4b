"""Dense tensors with tape-based reverse-mode differentiation.

Values live in numpy arrays (float32 unless :func:`precision` says otherwise).
Every op that touches a tensor with ``requires_grad`` appends a node to the
active :class:`Tape`; :func:`backward` replays the tape in reverse.

    >>> with Tape() as tape:
    ...     x = Tensor([1.0, 2.0], requires_grad=True)
    ...     loss = (x * x).sum()
    ...     backward(loss, tape)
    >>> x.grad
    array([2., 4.], dtype=float32)
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "backward", "no_grad", "precision", "get_dtype",
    "matmul", "elementwise", "add", "sub", "mul", "sigmoid", "tanh", "relu",
    "exp", "log", "softmax_rows", "log_softmax_rows", "embed_lookup", "pick",
    "weighted_sum", "conv_time", "max_over_time", "batch_norm", "concat",
    "reshape", "index", "tensor_sum", "gradient_check", "AdamState", "RMSpropState",
    "adam_step", "rmsprop_step", "clip_params", "Adam", "RMSprop",
    "DimensionError", "ConfigurationError", "ParamStore",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A structural setting makes the computation impossible."""


_DTYPE = [np.float32]
_GRAD_ENABLED = [True]


def get_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors in ``dtype`` for the duration of the block."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (sampling, rollouts, evaluation)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=get_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self):
        return mul(tensor_sum(self), 1.0 / self.data.size)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def __getitem__(self, idx):
        return index(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable ops executed while active."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, out, inputs, backward_fn):
        self.nodes.append(_Node(out, inputs, backward_fn))

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_DEFAULT_TAPE = Tape()
_TAPES: list[Tape] = []


def _active_tape() -> Tape:
    return _TAPES[-1] if _TAPES else _DEFAULT_TAPE


def _result(arr, inputs, backward_fn) -> Tensor:
    needs = _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs)
    if needs:
        _active_tape().record(out, inputs, backward_fn)
    return out


def _accumulate(t: Tensor, g):
    if g is None or not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor, tape: Tape | None = None, retain: bool = False) -> None:
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Gradients accumulate; zero leaf grads between optimisation steps.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else _active_tape()
    seed = np.ones_like(loss.data)
    if loss.grad is None:
        loss.grad = seed
    else:
        loss.grad = loss.grad + seed
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            _accumulate(inp, gi)
    if not retain:
        tape.clear()


# ---------------------------------------------------------------- arithmetic


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.data.dtype)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    _check_broadcast(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]`` (or ``b[k]``), with leading batch dims on ``a`` only."""
    if b.data.ndim not in (1, 2) or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = a.data @ b.data

    def bw(g):
        if b.data.ndim == 1:
            ga = g[..., None] * b.data
            gb = np.tensordot(a.data, g, axes=(tuple(range(a.data.ndim - 1)),) * 2)
        else:
            ga = g @ b.data.T
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _result(out, (a, b), bw)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


def _sigmoid_np(v):
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1 - t * t),))


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _result(x.data * m, (x,), lambda g: (g * m,))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _result(e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "mul": mul}


def elementwise(x: Tensor, kind: str, y: Tensor | None = None) -> Tensor:
    if kind in _UNARY:
        return _UNARY[kind](x)
    if kind in _BINARY:
        if y is None:
            raise ValueError(f"{kind} needs a second operand")
        if x.shape != y.shape:
            raise DimensionError(f"{kind}: shapes {x.shape} and {y.shape} differ")
        return _BINARY[kind](x, y)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- reductions


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis (max-subtracted)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), bw)


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _result(out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def index(x: Tensor, idx) -> Tensor:
    """Basic slicing (``x[:, a:b]`` etc.)."""
    def bw(g):
        gx = np.zeros_like(x.data)
        gx[idx] += g
        return (gx,)

    return _result(x.data[idx], (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(out, tuple(xs), bw)


# ---------------------------------------------------------------- gathers


def embed_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; ids may be any integer array shape."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    bad = (ids < 0) | (ids >= V)
    if bad.any():
        raise IndexError(f"token id {int(ids[bad].flat[0])} outside vocabulary of size {V}")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), bw)


def pick(x: Tensor, idx) -> Tensor:
    """``out[b] = x[b, idx[b]]`` for a 2-D ``x``."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _result(x.data[rows, idx], (x,), bw)


def weighted_sum(w: Tensor, x: Tensor) -> Tensor:
    """``out[b] = sum_k w[b, k] * x[b, k, :]``."""
    if w.shape != x.shape[:2]:
        raise DimensionError(f"weighted_sum: weights {w.shape} vs items {x.shape}")
    out = np.einsum("bk,bkd->bd", w.data, x.data)

    def bw(g):
        return np.einsum("bd,bkd->bk", g, x.data), w.data[:, :, None] * g[:, None, :]

    return _result(out, (w, x), bw)


# ---------------------------------------------------------------- conv / pool / norm


def conv_time(s: Tensor, kernel: Tensor, bias) -> Tensor:
    """Full-width temporal convolution, stride 1, no padding.

    Accepts the single-filter form ``s[T, M]``, ``kernel[C, M]``, scalar bias
    (output ``[T-C+1]``) and the batched form ``s[B, T, M]``,
    ``kernel[F, C, M]``, ``bias[F]`` (output ``[B, T-C+1, F]``).
    """
    bias = _as_tensor(bias)
    single = s.data.ndim == 2
    x = s.data[None] if single else s.data
    k = kernel.data[None] if kernel.data.ndim == 2 else kernel.data
    B, T, M = x.shape
    F, C, Mk = k.shape
    if Mk != M:
        raise DimensionError(f"conv_time: kernel width {Mk} != embedding width {M}")
    if C > T:
        raise ConfigurationError(f"conv_time: window {C} longer than sequence {T}")
    L = T - C + 1
    win = np.lib.stride_tricks.sliding_window_view(x, C, axis=1)  # B, L, M, C
    out = np.einsum("blmc,fcm->blf", win, k, optimize=True) + bias.data.reshape(-1)

    def bw(g):
        g = g.reshape(B, L, F)
        gk = np.einsum("blmc,blf->fcm", win, g, optimize=True)
        gx = np.zeros_like(x)
        for c in range(C):
            gx[:, c:c + L, :] += g @ k[:, c, :]
        gb = g.sum(axis=(0, 1))
        if single:
            return gx[0], gk[0], gb.reshape(bias.shape)
        return gx, gk, gb.reshape(bias.shape)

    if single:
        out = out[0, :, 0]
    return _result(out, (s, kernel, bias), bw)


def max_over_time(v: Tensor) -> Tensor:
    """Max along axis 0 for ``[L]`` input, axis 1 for ``[B, L, F]``.

    Gradient goes to the first maximal position.
    """
    axis = 0 if v.data.ndim == 1 else 1
    if v.shape[axis] == 0:
        raise ValueError("max_over_time of an empty sequence")
    arg = v.data.argmax(axis=axis)
    out = np.take_along_axis(v.data, np.expand_dims(arg, axis), axis).squeeze(axis)

    def bw(g):
        gv = np.zeros_like(v.data)
        np.put_along_axis(gv, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (gv,)

    return _result(np.asarray(out), (v,), bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str,
               running_mean: np.ndarray, running_var: np.ndarray,
               eps: float = 1e-5, momentum: float = 0.9) -> Tensor:
    """Per-feature normalisation of ``x[B, F]``.

    In ``train`` mode the batch moments are used and the running arrays are
    updated in place (``r = momentum * r + (1 - momentum) * batch``).
    """
    if x.data.ndim != 2 or x.shape[1] != gamma.shape[0] or beta.shape != gamma.shape:
        raise DimensionError(f"batch_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    if mode == "train":
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    elif mode == "infer":
        mu, var = running_mean.astype(x.data.dtype), running_var.astype(x.data.dtype)
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data
    n = x.shape[0]

    def bw(g):
        gg = (g * xhat).sum(axis=0)
        gb = g.sum(axis=0)
        gxhat = g * gamma.data
        if mode == "train":
            gx = inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        else:
            gx = gxhat * inv
        return gx, gg, gb

    return _result(out.astype(x.data.dtype, copy=False), (x, gamma, beta), bw)


# ---------------------------------------------------------------- gradient check


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between the taped gradient of ``f`` at ``x`` and
    central differences. ``f`` must build its graph from ``x`` each call."""
    x.grad = None
    with Tape() as tape:
        loss = f(x)
        backward(loss, tape)
    analytic = np.zeros(x.shape, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)
    numeric = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    orig = flat.copy()
    with no_grad():
        for i in range(flat.size):
            flat[i] = orig[i] + h
            fp = float(f(x).data)
            flat[i] = orig[i] - h
            fm = float(f(x).data)
            flat[i] = orig[i]
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------- optimisers


def _check_congruent(params, grads):
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if g is not None and g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.name or ''}{p.shape}")


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


@dataclass
class RMSpropState:
    lr: float = 5e-5
    rho: float = 0.9
    eps: float = 1e-8
    sq: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads, state: AdamState) -> None:
    """Bias-corrected Adam, in place. ``None`` grads count as zero."""
    _check_congruent(params, grads)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= upd.astype(p.data.dtype, copy=False)


def rmsprop_step(params: Sequence[Tensor], grads, state: RMSpropState) -> None:
    _check_congruent(params, grads)
    if not state.sq:
        state.sq = [np.zeros_like(p.data) for p in params]
    for p, g, sq in zip(params, grads, state.sq):
        if g is None:
            g = np.zeros_like(p.data)
        sq *= state.rho
        sq += (1 - state.rho) * g * g
        p.data -= (state.lr * g / (np.sqrt(sq) + state.eps)).astype(p.data.dtype, copy=False)


def clip_params(params: Iterable[Tensor], bound: float) -> None:
    if not bound > 0:
        raise ValueError(f"clip bound must be positive, got {bound}")
    for p in params:
        np.clip(p.data, -bound, bound, out=p.data)


class Adam:
    """Adam over a fixed parameter list, reading ``.grad`` from each tensor."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class RMSprop:
    def __init__(self, params, lr=5e-5, rho=0.9, eps=1e-8):
        self.params = list(params)
        self.state = RMSpropState(lr=lr, rho=rho, eps=eps)

    def step(self):
        rmsprop_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class ParamStore:
    """Named trainable tensors plus named non-trainable buffers."""

    def __init__(self, params: dict | None = None, buffers: dict | None = None):
        self.params: dict = dict(params or {})
        self.buffers: dict = dict(buffers or {})

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self) -> list:
        return list(self.params)

    def tensors(self) -> list:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "ParamStore":
        """Deep snapshot; safe to read concurrently with training on the original."""
        params = {}
        for k, p in self.params.items():
            t = Tensor._wrap(p.data.copy(), p.requires_grad)
            t.name = k
            params[k] = t
        return ParamStore(params, {k: v.copy() for k, v in self.buffers.items()})

    def arrays(self) -> dict:
        """Every tensor and buffer by name (buffers prefixed ``buffer:``)."""
        out = {k: p.data for k, p in self.params.items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out

    def max_abs(self) -> float:
        return max(float(np.abs(p.data).max()) for p in self.params.values())

    def equal(self, other: "ParamStore") -> bool:
        a, b = self.arrays(), other.arrays()
        return a.keys() == b.keys() and all(
            a[k].dtype == b[k].dtype and a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes()
            for k in a)
