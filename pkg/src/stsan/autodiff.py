"""Dense multi-axis tensors with reverse-mode automatic differentiation.

The design is a recorded tape: every differentiable op appends
(output, inputs, backward_rule) to the innermost active `Tape`, and
`Tape.gradients` replays the records in reverse, accumulating gradients by
summation for tensors used more than once. Values are plain numpy arrays;
float32 is the training default, float64 is required for gradient checking.

Hot kernels (convolution unfold/fold, softmax, layer norm) are delegated to
`stsan.kernels`, which picks the compiled core or the numpy fallback at
import time.
"""

from __future__ import annotations

import hashlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, DimensionError

__all__ = [
    "Tensor", "Tape", "ParamStore", "tensor", "glorot_uniform",
    "add", "sub", "mul", "neg", "matmul", "matmul_last2", "transpose_last2",
    "permute", "reshape", "concat", "reduce_sum", "reduce_mean",
    "softmax_last", "layer_norm", "conv2d", "elementwise", "relu", "sigmoid",
    "tanh", "dropout", "grad_check",
]


class Tensor:
    """A dense real-valued array, optionally tracked for gradients.

    Values are treated as immutable once produced by an op; `grad` is filled
    in by `Tape.gradients` for requested source tensors.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# --- tape ------------------------------------------------------------------

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records ops in execution order for one forward pass.

    A tape belongs to one training context; do not share across threads.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited a non-innermost tape")
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def gradients(self, loss: Tensor, sources):
        """Accumulate d(loss)/d(source) for every requested source.

        `sources` is either a ParamStore (returns {name: grad} for non-frozen
        parameters that are reached from the loss) or a sequence of Tensors
        (returns a list aligned with it, None where unreached). Gradients of
        tensors used multiple times sum. Also fills in `.grad` on each
        source tensor.
        """
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        if isinstance(sources, ParamStore):
            wanted = [(name, sources[name]) for name in sources.names()
                      if not sources.is_frozen(name)]
            source_tensors = [t for _, t in wanted]
        else:
            wanted = None
            source_tensors = list(sources)
        keep = {id(t) for t in source_tensors}

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward in reversed(self._entries):
            g = grads.get(id(out))
            if g is None:
                continue
            if id(out) not in keep:
                del grads[id(out)]
            in_grads = backward(g)
            for t, gt in zip(inputs, in_grads):
                if gt is None or not t.requires_grad:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = gt if acc is None else acc + gt

        for t in source_tensors:
            t.grad = grads.get(id(t))
        if wanted is not None:
            return {name: grads[id(t)] for name, t in wanted if id(t) in grads}
        return [grads.get(id(t)) for t in source_tensors]


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if requires:
        tape = _current_tape()
        if tape is not None:
            tape._entries.append((out, inputs, backward))
    return out


# --- parameter store -------------------------------------------------------

class ParamStore:
    """Ordered name -> Tensor map for learnable weights.

    Iteration order is insertion order (deterministic). Frozen names are
    excluded from gradient computation and from optimizer updates.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        # owned, writable copy: entries are updated in place by the optimizer
        arr = np.array(value, dtype=self.dtype, order="C")
        t = Tensor(arr, requires_grad=True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def has_prefix(self, prefix: str) -> bool:
        return any(n.startswith(prefix) for n in self._entries)

    def freeze(self, names: Iterable[str]):
        for name in names:
            if name not in self._entries:
                raise ContractError(f"cannot freeze unknown parameter {name!r}")
            self._frozen.add(name)
            self._entries[name].requires_grad = False

    def freeze_prefix(self, prefix: str):
        matching = [n for n in self._entries if n.startswith(prefix)]
        if not matching:
            raise ContractError(f"no parameters match prefix {prefix!r}")
        self.freeze(matching)

    @property
    def frozen(self) -> frozenset[str]:
        return frozenset(self._frozen)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def payload_hash(self, prefix: str = "") -> str:
        """SHA-256 over (name, shape, raw bytes) of matching entries, in order."""
        h = hashlib.sha256()
        for name, t in self._entries.items():
            if not name.startswith(prefix):
                continue
            h.update(name.encode("utf-8"))
            h.update(np.asarray(t.data.shape, dtype="<i8").tobytes())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._entries.items()}

    def restore(self, snap: dict[str, np.ndarray]):
        for name, arr in snap.items():
            np.copyto(self._entries[name].data, arr)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# --- broadcasting helpers --------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over axes that were broadcast relative to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- arithmetic ops --------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    out = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    ref = a if isinstance(a, Tensor) else b
    a = _as_tensor(a, ref)
    b = _as_tensor(b, ref)
    out = a.data - b.data

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a)
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes with numpy broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} vs {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # batched input x weight matrix: fold the batch into one GEMM each way
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), backward)

    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def matmul_last2(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading axes of both operands must be identical."""
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"leading axes differ: {a.shape} vs {b.shape}")
    return matmul(a, b)


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"need >=2-D tensor, got shape {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2), (x,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(dtype, copy=False),)

    return _make(out, (x,), backward)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else x.data.size // out.size
    shape, dtype = x.shape, x.dtype

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).astype(dtype, copy=False),)

    return _make(out, (x,), backward)


# --- kernel-backed ops -----------------------------------------------------

def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax_last needs a non-empty last axis")
    y2 = kernels.softmax_forward(_rows(x.data))
    out = y2.reshape(x.shape)

    def backward(g):
        gx = kernels.softmax_backward(_rows(g), y2)
        return (gx.reshape(x.shape),)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then rescale."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    x2 = _rows(x.data)
    y2, xhat, inv_std = kernels.layer_norm_forward(
        x2, np.ascontiguousarray(gamma.data), np.ascontiguousarray(beta.data), float(eps))
    out = y2.reshape(x.shape)

    def backward(g):
        gx2, ggamma, gbeta = kernels.layer_norm_backward(
            _rows(g), xhat, inv_std, np.ascontiguousarray(gamma.data))
        return (gx2.reshape(x.shape) if x.requires_grad else None,
                ggamma if gamma.requires_grad else None,
                gbeta if beta.requires_grad else None)

    return _make(out, (x, gamma, beta), backward)


def conv2d(x: Tensor, kernel: Tensor, padding: str = "same") -> Tensor:
    """2-D correlation over the trailing (H, W, C) axes of x.

    x: (..., H, W, C_in), kernel: (kh, kw, C_in, C_out). Leading axes are
    treated as batch; `same` zero-pads to preserve H and W, `valid` shrinks
    by kernel-1 per axis.
    """
    if padding not in ("same", "valid"):
        raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}")
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be 4-D (kh, kw, C_in, C_out), got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"kernel spatial dims must be odd, got {kh}x{kw}")
    if x.ndim < 3:
        raise DimensionError(f"input must be at least (H, W, C), got {x.shape}")
    h, w, c = x.shape[-3:]
    if c != cin:
        raise DimensionError(f"input channels {c} do not match kernel C_in {cin}")

    lead = x.shape[:-3]
    n = int(np.prod(lead)) if lead else 1
    x4 = np.ascontiguousarray(x.data.reshape(n, h, w, c))
    if padding == "same":
        ph, pw = kh // 2, kw // 2
        x4 = np.pad(x4, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    hp, wp = x4.shape[1], x4.shape[2]
    if hp < kh or wp < kw:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    ho, wo = hp - kh + 1, wp - kw + 1

    k2 = np.ascontiguousarray(kernel.data.reshape(kh * kw * cin, cout))
    cols = kernels.im2col(x4, kh, kw)
    y = (cols @ k2).reshape(lead + (ho, wo, cout))

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, cout))
        gx_out = gk_out = None
        if kernel.requires_grad:
            gk_out = (cols.T @ g2).reshape(kernel.shape)
        if x.requires_grad:
            gcols = np.ascontiguousarray(g2 @ k2.T)
            gx4 = kernels.col2im(gcols, n, hp, wp, cin, kh, kw)
            if padding == "same":
                gx4 = gx4[:, kh // 2: hp - (kh // 2), kw // 2: wp - (kw // 2), :]
            gx_out = gx4.reshape(x.shape)
        return gx_out, gk_out

    return _make(y, (x, kernel), backward)


# --- pointwise nonlinearities ----------------------------------------------

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def elementwise(x: Tensor, fn: str) -> Tensor:
    """Apply relu, sigmoid or tanh elementwise."""
    if fn == "relu":
        out = np.maximum(x.data, 0)
        mask = x.data > 0
        return _make(out, (x,), lambda g: (g * mask,))
    if fn == "sigmoid":
        out = _stable_sigmoid(x.data)
        return _make(out, (x,), lambda g: (g * out * (1.0 - out),))
    if fn == "tanh":
        out = np.tanh(x.data)
        return _make(out, (x,), lambda g: (g * (1.0 - out * out),))
    raise ConfigError(f"unknown elementwise function {fn!r}")


def relu(x: Tensor) -> Tensor:
    return elementwise(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return elementwise(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return elementwise(x, "tanh")


def dropout(x: Tensor, rate: float, training: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity (same object, bitwise) when not training."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout requires an explicit rng")
    scale = 1.0 / (1.0 - rate)
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) * x.dtype.type(scale)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# --- gradient checking -----------------------------------------------------

def grad_check(f, params: ParamStore, h: float = 1e-5,
               refine_h: tuple[float, ...] = (),
               refine_above: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    `f` maps the ParamStore to a scalar Tensor and must be deterministic.
    Requires a float64 store; the relative error uses a 1e-8 denominator floor.

    A single step size cannot serve every coordinate: a ReLU kink within `h`
    of a pre-activation corrupts the difference quotient (wants smaller h),
    while coordinates with tiny gradients are dominated by evaluation
    round-off (wants larger h). When `refine_h` is given, coordinates whose
    error at `h` exceeds `refine_above` are re-measured at each fallback step
    and score their best match; a genuinely wrong gradient fails at every
    step size.
    """
    if params.dtype != np.float64:
        raise ConfigError("grad_check requires a float64 ParamStore")
    if h <= 0 or any(hh <= 0 for hh in refine_h):
        raise ConfigError("h must be positive")

    with Tape() as tape:
        loss = f(params)
    analytic = tape.gradients(loss, params)

    def coord_error(flat, idx, an, step):
        orig = flat[idx]
        flat[idx] = orig + step
        fp = f(params).item()
        flat[idx] = orig - step
        fm = f(params).item()
        flat[idx] = orig
        fd = (fp - fm) / (2.0 * step)
        return abs(fd - an) / max(abs(fd), abs(an), 1e-8)

    worst = 0.0
    for name, t in params.items():
        if params.is_frozen(name):
            continue
        an = analytic.get(name)
        if an is None:
            an = np.zeros_like(t.data)
        an_flat = an.reshape(-1)
        flat = t.data.reshape(-1)
        for idx in range(flat.size):
            err = coord_error(flat, idx, an_flat[idx], h)
            if err > refine_above:
                for hh in refine_h:
                    err = min(err, coord_error(flat, idx, an_flat[idx], hh))
                    if err <= refine_above:
                        break
            worst = max(worst, err)
    return worst
