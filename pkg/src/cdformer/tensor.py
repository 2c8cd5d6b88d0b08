"""Dense tensors with reverse-mode automatic differentiation.

The compute substrate for the whole package: numpy arrays wrapped in a
Tensor that records the operations producing it. Calling ``backward()`` on a
scalar result walks the recorded graph in reverse topological order and
accumulates gradients on the leaf tensors that requested them. The graph is
rebuilt on every forward pass; recorded tensors are never mutated in place.

Conventions:
  * float32 is the training/benchmark dtype, float64 the gradient-check dtype
    (finite differences need the extra precision).
  * ``reduce_max_axis`` routes gradients to the first maximal element so tied
    maxima behave deterministically.
  * GELU uses the tanh approximation.
  * Leaf tensors (created directly, not produced by an op) accumulate into
    ``.grad``; repeated backward calls without ``zero_grad`` add up.

Set ``CDF_DEBUG=1`` to assert, after every operation, that outputs are
finite; a NaN/Inf then raises immediately, naming the op.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, FormatError, IndexRangeError, ShapeError

_grad_enabled = True
_debug_validate = os.environ.get("CDF_DEBUG", "") == "1"


def strict_mode() -> bool:
    """True when CDF_STRICT=1: callers must avoid nondeterministic reduction orders."""
    return os.environ.get("CDF_STRICT", "") == "1"


_malloc_tuned = False


def tune_malloc() -> None:
    """Raise glibc's mmap threshold so large op temporaries get reused.

    By default glibc returns every allocation above 128 KiB straight to the
    OS, which makes each tensor op re-fault its pages; at benchmark/training
    sizes that dominates the actual math. Safe to call repeatedly; a no-op on
    non-glibc platforms.
    """
    global _malloc_tuned
    if _malloc_tuned:
        return
    _malloc_tuned = True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 29)  # M_MMAP_THRESHOLD
    except (OSError, AttributeError):
        pass


def set_debug_validate(flag: bool) -> None:
    global _debug_validate
    _debug_validate = flag


class no_grad:
    """Context manager disabling graph recording (inference / benchmarks)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


# --- allocation meter (benchmark memory proxy) -------------------------------

_alloc_peak = 0
_alloc_track = False


def reset_alloc_meter() -> None:
    global _alloc_peak, _alloc_track
    _alloc_peak = 0
    _alloc_track = True


def peak_alloc_bytes() -> int:
    return _alloc_peak


def _note_alloc(nbytes: int) -> None:
    global _alloc_peak
    if _alloc_track and nbytes > _alloc_peak:
        _alloc_peak = nbytes


class Tensor:
    """A dense row-major array plus optional gradient slot and graph record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        _note_alloc(arr.nbytes)

    # -- basic introspection --

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, op={self._op})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar --

    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, s):
        if isinstance(s, Tensor):
            raise ShapeError("tensor/tensor division is not an op; divide by a scalar")
        return scale(self, 1.0 / float(s))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _debug_validate and not np.all(np.isfinite(data)):
        raise ContractError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    _note_alloc(data.nbytes)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(a.data - b.data, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(a.data * b.data, "mul", (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _make(a.data * s, "scale", (a,), bwd)


# --- matmul / einsum ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.data.shape} @ {b.data.shape}")

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(np.matmul(a.data, b.data), "matmul", (a, b), bwd)


def _parse_einsum(spec: str):
    lhs, out = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for sub_, other in ((sa, sb), (sb, sa)):
        if len(set(sub_)) != len(sub_):
            raise ShapeError(f"einsum spec '{spec}' repeats an index within one operand")
        if not set(sub_) <= set(out) | set(other):
            raise ShapeError(f"einsum spec '{spec}' has an index summed within one operand")
    return sa, sb, out


_EINSUM_CACHE: dict = {}


def einsum2(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum whose backward is einsum with permuted specs.

    Restricted to specs where each operand's indices all appear in the
    output or in the other operand (true for every attention contraction
    used here).
    """
    parsed = _EINSUM_CACHE.get(spec)
    if parsed is None:
        parsed = _parse_einsum(spec)
        _EINSUM_CACHE[spec] = parsed
    sa, sb, out = parsed

    def bwd(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, b.data)
        gb = np.einsum(f"{out},{sa}->{sb}", g, a.data)
        return ga, gb

    return _make(np.einsum(spec, a.data, b.data), "einsum", (a, b), bwd)


# --- shape manipulation ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), "reshape", (a,), bwd)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def bwd(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _make(np.ascontiguousarray(np.swapaxes(a.data, ax1, ax2)), "swapaxes", (a,), bwd)


def expand_axis(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of extent n by broadcasting; backward sums over it."""
    expanded = np.broadcast_to(
        np.expand_dims(a.data, axis),
        a.data.shape[:axis] + (n,) + a.data.shape[axis:],
    )

    def bwd(g):
        return (g.sum(axis=axis),)

    return _make(np.ascontiguousarray(expanded), "expand_axis", (a,), bwd)


# --- reductions ------------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        return (np.broadcast_to(g, a.data.shape),)

    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), "sum", (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    inv = 1.0 / a.data.size

    def bwd(g):
        return (np.broadcast_to(g * inv, a.data.shape),)

    return _make(np.asarray(a.data.mean(), dtype=a.data.dtype), "mean", (a,), bwd)


def sum_last(a: Tensor) -> Tensor:
    def bwd(g):
        return (np.repeat(g[..., None], a.data.shape[-1], axis=-1),)

    return _make(a.data.sum(axis=-1), "sum_last", (a,), bwd)


def reduce_max_axis(a: Tensor, axis: int = 1) -> Tensor:
    """Max over one axis; gradient flows to the first maximal element on ties."""
    if a.data.shape[axis] < 1:
        raise ShapeError(f"reduce_max_axis needs extent >= 1 on axis {axis}, got {a.data.shape}")
    idx = np.argmax(a.data, axis=axis)

    def bwd(g):
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (gx,)

    return _make(np.max(a.data, axis=axis), "reduce_max_axis", (a,), bwd)


# --- nonlinearities ---------------------------------------------------------------

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)

    def bwd(g):
        # 0.5*(1+t) + 0.5*x*(1-t^2)*c*(1+3a*x^2), built in place: these arrays
        # are the largest in the backward pass
        du = x * x
        du *= 3.0 * _GELU_A
        du += 1.0
        du *= _GELU_C
        tmp = t * t
        np.subtract(1.0, tmp, out=tmp)
        du *= tmp
        du *= x
        du += 1.0
        du += t
        du *= 0.5
        du *= g
        return (du,)

    return _make(0.5 * x * (1.0 + t), "gelu", (a,), bwd)


def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    if a.data.shape[-1] < 1:
        raise ShapeError(f"softmax_last needs a last extent >= 1, got {a.data.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, "softmax_last", (a,), bwd)


def log_softmax_last(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bwd(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax_last", (a,), bwd)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    x = a.data
    c = x.shape[-1]
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * invstd

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gxhat = g * gamma.data
        gx = invstd / c * (
            c * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _make(xhat * gamma.data + beta.data, "layer_norm", (a, gamma, beta), bwd)


# --- gather / scatter --------------------------------------------------------------


def _check_index_range(idx: np.ndarray, n: int) -> None:
    if idx.size == 0:
        return
    lo, hi = int(idx.min()), int(idx.max())
    if lo < 0 or hi >= n:
        bad = lo if lo < 0 else hi
        raise IndexRangeError(f"index {bad} out of range [0, {n})")


def gather_rows(x: Tensor, idx) -> Tensor:
    """out[..., :] = x[idx[...], :]. Backward scatter-adds into source rows."""
    idx = np.asarray(idx)
    _check_index_range(idx, x.data.shape[0])

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx.reshape(-1), g.reshape(-1, *x.data.shape[1:]))
        return (gx,)

    return _make(x.data[idx], "gather_rows", (x,), bwd)


def scatter_mean(x: Tensor, rows, n_rows: int) -> Tensor:
    """Average rows of x (A x C) into n_rows buckets; empty buckets stay zero."""
    rows = np.asarray(rows).reshape(-1)
    _check_index_range(rows, n_rows)
    counts = np.bincount(rows, minlength=n_rows)
    denom = np.maximum(counts, 1).astype(x.data.dtype)
    out = np.zeros((n_rows,) + x.data.shape[1:], dtype=x.data.dtype)
    np.add.at(out, rows, x.data)
    out /= denom.reshape((-1,) + (1,) * (out.ndim - 1))

    def bwd(g):
        return ((g / denom.reshape((-1,) + (1,) * (g.ndim - 1)))[rows],)

    return _make(out, "scatter_mean", (x,), bwd)


def take_last(x: Tensor, idx) -> Tensor:
    """out[...] = x[..., idx[...]]: pick one entry along the last axis."""
    idx = np.asarray(idx)
    _check_index_range(idx, x.data.shape[-1])
    picked = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make(picked, "take_last", (x,), bwd)


# --- linear layers -----------------------------------------------------------------


@dataclass
class LinearParams:
    """Weight (C_in x C_out) and optional bias (C_out)."""

    weight: Tensor
    bias: Optional[Tensor] = None


def linear(x: Tensor, p: LinearParams) -> Tensor:
    w = p.weight
    c_in, c_out = w.data.shape
    if x.data.shape[-1] != c_in:
        raise ShapeError(f"linear: input last extent {x.data.shape[-1]} != fan-in {c_in}")
    y = x.data @ w.data
    if p.bias is not None:
        y = y + p.bias.data
    parents = (x, w) if p.bias is None else (x, w, p.bias)

    def bwd(g):
        g2 = g.reshape(-1, c_out)
        x2 = x.data.reshape(-1, c_in)
        gx = (g2 @ w.data.T).reshape(x.data.shape)
        gw = x2.T @ g2
        if p.bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(y, "linear", parents, bwd)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until inside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def linear_init(
    rng: np.random.Generator, c_in: int, c_out: int, bias: bool = True, dtype=np.float32
) -> LinearParams:
    w = Tensor(trunc_normal(rng, (c_in, c_out), dtype=dtype), requires_grad=True)
    b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
    return LinearParams(w, b)


# --- reverse-mode driver --------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


def grad_check(f, x, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    f maps a Tensor to a scalar Tensor; x must be float64 (finite differences
    at eps ~ 1e-5 lose too much precision in float32).
    """
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    loss = f(xt)
    backward(loss)
    if xt.grad is None:
        raise ContractError("grad_check: f did not propagate gradients to x")
    analytic = xt.grad.reshape(-1)

    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            fp = float(f(Tensor(base.copy())).data)
            flat[i] = saved - eps
            fm = float(f(Tensor(base.copy())).data)
            flat[i] = saved
            numeric[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# --- serialization ----------------------------------------------------------------------

_MAGIC = b"CDT1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


def write_tensor_blob(path, arr: np.ndarray) -> None:
    """Flat binary container: magic, dtype code u8, rank u8, u64 LE extents, LE data."""
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ContractError(f"unsupported blob dtype {arr.dtype}")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<BB", code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor_blob(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise FormatError(f"bad tensor blob magic {magic!r}")
        code, rank = struct.unpack("<BB", f.read(2))
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
        dtype = _CODE_DTYPES[code]
        n = int(np.prod(shape)) if shape else 1
        buf = f.read(n * dtype.itemsize)
        if len(buf) != n * dtype.itemsize:
            raise FormatError("tensor blob truncated")
        arr = np.frombuffer(buf, dtype=dtype.newbyteorder("<")).astype(dtype)
    return arr.reshape(shape)
