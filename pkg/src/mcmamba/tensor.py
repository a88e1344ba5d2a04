"""Dense numpy-backed tensors with a reverse-mode gradient tape.

Every layer of the network is expressed with the primitives in this module.
Recording happens only while a :class:`Tape` is active and at least one
input of an op requires gradients; otherwise ops are plain numpy calls.

Contractions default to an exact reduction mode: each output element is
produced by the same sequence of floating point operations no matter how
many rows are batched together. Streaming and offline inference depend on
this to agree bit for bit. :func:`fast_reduction` swaps in BLAS for speed.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterator, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "tensor",
    "parameter",
    "active_tape",
    "fast_reduction",
    "exact_reduction_enabled",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "silu",
    "sigmoid",
    "softplus",
    "exp",
    "absolute",
    "sqrt",
    "norm_last",
    "sum_all",
    "mean_all",
    "concat",
    "reshape",
    "swapaxes",
    "flip",
    "take",
    "depthwise_causal_conv1d",
    "selective_scan",
    "linear_recurrence",
    "backward",
    "gradcheck",
]

_FLOATS = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Row-major real array, optionally tracked by a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float64)
        if arr.size == 0:
            raise ShapeError(f"tensor dimensions must all be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def tensor(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Append-only record of primitive ops; one tape per training worker."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_TAPES: list[Tape] = []
_EXACT = [True]


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def fast_reduction() -> Iterator[None]:
    """Use BLAS for contractions; results may then depend on batch size."""
    prev = _EXACT[0]
    _EXACT[0] = False
    try:
        yield
    finally:
        _EXACT[0] = prev


def exact_reduction_enabled() -> bool:
    return _EXACT[0]


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None or tape.consumed:
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    out._tape = tape
    tape.nodes.append(_Node(tuple(inputs), out, backward))
    return out


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# ---------------------------------------------------------------- arithmetic


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a trailing-dimension bias."""
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, _sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -_sum_to(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, _sum_to(g * ad, b.shape)))


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant (python scalar or array broadcastable to ``a``)."""
    c = np.asarray(c, dtype=a.dtype)
    out = a.data * c
    if out.shape != a.shape:
        raise ShapeError(f"scale: constant of shape {c.shape} would broadcast {a.shape}")
    return _record(out, (a,), lambda g: (g * c,))


def _contract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _EXACT[0]:
        return np.einsum("...k,kn->...n", a, b, optimize=False)
    return a @ b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]``."""
    a, b = _wrap(a), _wrap(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _contract(g, bd.T)
        a2 = ad.reshape(-1, ad.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gb = np.einsum("mk,mn->kn", a2, g2, optimize=False) if _EXACT[0] else a2.T @ g2
        return ga, gb

    return _record(_contract(ad, bd), (a, b), back)


# --------------------------------------------------------------- activations


def relu(x: Tensor) -> Tensor:
    d = x.data
    mask = d > 0
    return _record(np.where(mask, d, 0.0).astype(d.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _record(s, (x,), lambda g: (g * s * (1 - s),))


def _sigmoid(d: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    return np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)


def silu(x: Tensor) -> Tensor:
    d = x.data
    s = _sigmoid(d)
    return _record(d * s, (x,), lambda g: (g * (s + d * s * (1 - s)),))


def _softplus(d: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", under="ignore"):
        out = np.where(d > 30, d, np.log1p(np.exp(np.minimum(d, 30))))
        # log1p(e^x) == e^x to double precision well before x = -30
        out = np.where(d < -30, np.exp(d), out)
    return out.astype(d.dtype)


def softplus(x: Tensor) -> Tensor:
    d = x.data
    return _record(_softplus(d), (x,), lambda g: (g * _sigmoid(d),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _record(e, (x,), lambda g: (g * e,))


def absolute(x: Tensor) -> Tensor:
    d = x.data
    return _record(np.abs(d), (x,), lambda g: (g * np.sign(d),))


def sqrt(x: Tensor, eps: float = 0.0) -> Tensor:
    """``sqrt(x + eps)``; eps keeps the derivative finite at zero."""
    r = np.sqrt(x.data + eps)
    return _record(r, (x,), lambda g: (g * 0.5 / r,))


def norm_last(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis (e.g. complex magnitude of a
    ``[..., 2]`` real/imaginary pair). The gradient at zero is taken as zero."""
    d = x.data
    r = np.sqrt((d * d).sum(-1))

    def back(g):
        safe = np.where(r > 0, r, 1.0)
        return (np.where(r[..., None] > 0, g[..., None] * d / safe[..., None], 0.0),)

    return _record(r, (x,), back)


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _record(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
    )


# ------------------------------------------------------------------- layout


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_wrap(x) for x in xs]
    ax = axis % xs[0].ndim
    sizes = [x.shape[ax] for x in xs]
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in xs]} disagree off axis {axis}")
    splits = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([x.data for x in xs], axis=ax),
        xs,
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _record(
        np.ascontiguousarray(np.swapaxes(x.data, a, b)),
        (x,),
        lambda g: (np.ascontiguousarray(np.swapaxes(g, a, b)),),
    )


def flip(x: Tensor, axis: int) -> Tensor:
    return _record(
        np.ascontiguousarray(np.flip(x.data, axis)),
        (x,),
        lambda g: (np.ascontiguousarray(np.flip(g, axis)),),
    )


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    src_shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _record(np.ascontiguousarray(x.data[index]), (x,), back)


# ------------------------------------------------------------ sequence ops


def depthwise_causal_conv1d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor,
    tail: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Per-channel causal convolution along the time axis.

    ``x`` is ``[..., L, d]``; ``kernel`` is ``[d, K]`` with taps ordered
    oldest to newest so ``y[t] = sum_k kernel[:, k] * x[t - K + 1 + k] + bias``.
    ``tail`` holds the ``K - 1`` inputs preceding ``x`` (zeros when omitted).
    Returns the output and the tail to pass to the next chunk.
    """
    x, kernel, bias = _wrap(x), _wrap(kernel), _wrap(bias)
    if kernel.ndim != 2 or bias.shape != (kernel.shape[0],) or x.shape[-1] != kernel.shape[0]:
        raise ShapeError(
            f"depthwise_causal_conv1d: channels disagree: x {x.shape}, "
            f"kernel {kernel.shape}, bias {bias.shape}"
        )
    K = kernel.shape[1]
    L = x.shape[-2]
    lead = x.shape[:-2]
    d = x.shape[-1]
    if tail is None:
        tail = np.zeros(lead + (K - 1, d), dtype=x.dtype)
    elif tail.shape != lead + (K - 1, d):
        raise ShapeError(f"depthwise_causal_conv1d: tail shape {tail.shape} does not fit {x.shape}")
    xp = np.concatenate([tail, x.data], axis=-2)
    w = kernel.data
    y = xp[..., 0:L, :] * w[:, 0]
    for k in range(1, K):
        y = y + xp[..., k:k + L, :] * w[:, k]
    y = y + bias.data
    new_tail = xp[..., xp.shape[-2] - (K - 1):, :].copy()

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for k in range(K):
            gxp[..., k:k + L, :] += g * w[:, k]
            gw[:, k] = (g * xp[..., k:k + L, :]).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        return gxp[..., K - 1:, :], gw, gb

    return _record(y, (x, kernel, bias), back), new_tail


def linear_recurrence(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All prefixes of ``h_n = a_n h_{n-1} + b_n`` along axis 0, ``h_{-1} = 0``.

    Odd-even reduction: adjacent pairs combine with
    ``(a2, b2) o (a1, b1) = (a1 a2, a2 b1 + b2)``, the half-length problem is
    solved recursively, then even positions are filled in from their odd
    predecessors. Linear total work, logarithmic depth.
    """
    L = a.shape[0]
    if L == 1:
        return b.copy()
    n = L // 2
    a_odd, b_odd = a[1:2 * n:2], b[1:2 * n:2]
    h = np.empty_like(b)
    h[1::2] = linear_recurrence(a_odd * a[0:2 * n:2], a_odd * b[0:2 * n:2] + b_odd)
    h[0] = b[0]
    m = (L - 1) // 2
    if m:
        h[2::2] = a[2::2] * h[1:2 * m:2] + b[2::2]
    return h


def selective_scan(
    x: Tensor,
    delta: Tensor,
    A: Tensor,
    B: Tensor,
    C: Tensor,
    h0: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Input-dependent diagonal linear recurrence.

    Shapes: ``x, delta: [..., L, d]``, ``A: [d, s]``, ``B, C: [..., L, s]``.
    With ``dA_n = exp(delta_n * A)`` and ``u_n = (delta_n * x_n) outer B_n``::

        h_n = dA_n * h_{n-1} + u_n
        y_n = h_n @ C_n

    Returns ``y`` and the final state ``h_L`` (``[..., d, s]``, not tracked).
    The recurrence runs step by step in a compiled kernel, so splitting a
    sequence into chunks reproduces the unsplit result bit for bit.
    """
    x, delta, A, B, C = (_wrap(t) for t in (x, delta, A, B, C))
    lead, L, d = x.shape[:-2], x.shape[-2], x.shape[-1]
    s = A.shape[-1]
    if (
        delta.shape != x.shape
        or A.ndim != 2
        or A.shape[0] != d
        or B.shape != lead + (L, s)
        or C.shape != lead + (L, s)
    ):
        raise ShapeError(
            f"selective_scan: x {x.shape}, delta {delta.shape}, A {A.shape}, "
            f"B {B.shape}, C {C.shape} are inconsistent"
        )
    xd, dd, Ad, Bd, Cd = x.data, delta.data, A.data, B.data, C.data
    if not (np.isfinite(xd).all() and np.isfinite(dd).all()):
        raise FloatingPointError("selective_scan: non-finite input")
    h_init = np.zeros(lead + (d, s), dtype=xd.dtype) if h0 is None else h0
    if h_init.shape != lead + (d, s):
        raise ShapeError(f"selective_scan: state shape {h_init.shape} != {lead + (d, s)}")
    track = active_tape() is not None and any(t.requires_grad for t in (x, delta, A, B, C))
    N = int(np.prod(lead, dtype=np.int64))
    flat = (N, L, d)
    args = (
        np.ascontiguousarray(xd.reshape(flat)),
        np.ascontiguousarray(dd.reshape(flat)),
        np.ascontiguousarray(Ad),
        np.ascontiguousarray(Bd.reshape(N, L, s)),
        np.ascontiguousarray(Cd.reshape(N, L, s)),
        np.ascontiguousarray(h_init.reshape(N, d, s)),
    )
    hs = np.empty((N, L, d, s) if track else (1, 1, 1, 1), dtype=xd.dtype)
    y, h_last = _kernels.scan_forward(*args, hs, track)

    def back(gy):
        gx, gdt, gA, gB, gC = _kernels.scan_backward(
            *args, hs, np.ascontiguousarray(gy.reshape(flat))
        )
        return (
            gx.reshape(xd.shape),
            gdt.reshape(dd.shape),
            gA,
            gB.reshape(Bd.shape),
            gC.reshape(Cd.shape),
        )

    out = _record(y.reshape(xd.shape), (x, delta, A, B, C), back)
    return out, h_last.reshape(lead + (d, s))


# ----------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(loss) through ``tape``; fills ``.grad`` on every leaf.

    Returns a mapping from ``id(leaf)`` to its gradient.
    """
    if tape.consumed:
        raise TapeError("backward already ran on this tape; record a new one")
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss._tape is not tape:
        raise TapeError("loss was not recorded on this tape")
    tape.consumed = True
    produced = {id(node.output) for node in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
            if key not in produced:
                leaves[key] = inp
    out = {}
    for key, leaf in leaves.items():
        g = grads[key].reshape(leaf.shape).astype(leaf.dtype, copy=False)
        leaf.grad = g
        out[key] = g
    tape.nodes.clear()
    return out


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    samples_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``fn`` must rebuild the scalar loss from ``params`` on every call. With
    ``samples_per_tensor`` set, only that many random entries of each
    parameter are perturbed.
    """
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        loss = fn()
    for p in params:
        p.grad = None
    backward(tape, loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if samples_per_tensor is not None and flat.size > samples_per_tensor:
            idx = rng.choice(flat.size, samples_per_tensor, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn().data)
            flat[i] = orig - eps
            down = float(fn().data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
