"""Selective state-space core.

The continuous system has a diagonal, strictly negative ``A`` (stored as
``A_log`` with ``A = -exp(A_log)``). Each input step picks its own step size
``delta``, input map ``B`` and readout ``C``; zero-order hold gives
``Abar = exp(delta * A)`` and the simplified Euler rule gives
``Bbar x = (delta * x) outer B``. There is no feed-through term: ``y = C h``.

Sequences are laid out time-major, ``[..., L, d_inner]``; any leading axes
are independent lanes.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Iterator
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "SsmParams",
    "SsmState",
    "init_ssm_params",
    "project",
    "discretize",
    "scan_sequential",
    "scan_parallel",
    "scan_chunked",
    "linear_recurrence_parallel",
]


@dataclass
class SsmParams:
    A_log: Tensor  # [d, s]
    W_B: Tensor  # [d, s]
    W_C: Tensor  # [d, s]
    W_dt_down: Tensor  # [d, r]
    W_dt_up: Tensor  # [r, d]
    dt_bias: Tensor  # [d]

    @property
    def d_inner(self) -> int:
        return self.A_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    def A(self) -> Tensor:
        return T.scale(T.exp(self.A_log), -1.0)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            prefix + "A_log": self.A_log,
            prefix + "W_B": self.W_B,
            prefix + "W_C": self.W_C,
            prefix + "W_dt_down": self.W_dt_down,
            prefix + "W_dt_up": self.W_dt_up,
            prefix + "dt_bias": self.dt_bias,
        }


@dataclass
class SsmState:
    h: np.ndarray
    n_processed: int = 0

    @classmethod
    def zeros(cls, lead: tuple[int, ...], d_inner: int, d_state: int, dtype=np.float64):
        return cls(np.zeros(lead + (d_inner, d_state), dtype=dtype), 0)

    def copy(self) -> SsmState:
        return SsmState(self.h.copy(), self.n_processed)


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_ssm_params(
    d_inner: int,
    d_state: int = 16,
    dt_rank: int | None = None,
    rng: np.random.Generator | None = None,
    dt_min: float = 1e-3,
    dt_max: float = 1e-1,
) -> SsmParams:
    rng = rng or np.random.default_rng(0)
    r = dt_rank or max(1, math.ceil(d_inner / 16))
    a_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1)))
    bound = 1.0 / math.sqrt(d_inner)
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), d_inner))
    return SsmParams(
        A_log=T.parameter(a_log),
        W_B=T.parameter(rng.uniform(-bound, bound, (d_inner, d_state))),
        W_C=T.parameter(rng.uniform(-bound, bound, (d_inner, d_state))),
        W_dt_down=T.parameter(rng.uniform(-bound, bound, (d_inner, r))),
        W_dt_up=T.parameter(rng.uniform(-r**-0.5, r**-0.5, (r, d_inner))),
        dt_bias=T.parameter(_inv_softplus(dt)),
    )


def project(params: SsmParams, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent ``(delta, B, C)`` for every step of ``x``."""
    if x.shape[-1] != params.d_inner:
        raise T.ShapeError(f"ssm: input width {x.shape[-1]} != d_inner {params.d_inner}")
    pre = T.add(T.matmul(T.matmul(x, params.W_dt_down), params.W_dt_up), params.dt_bias)
    return T.softplus(pre), T.matmul(x, params.W_B), T.matmul(x, params.W_C)


def discretize(params: SsmParams, x_n) -> tuple[np.ndarray, np.ndarray]:
    """``(Abar_n, Bbar x_n)`` for a single step ``x_n: [d_inner]``."""
    x_n = np.asarray(x_n.data if isinstance(x_n, Tensor) else x_n, dtype=np.float64)
    if not np.isfinite(x_n).all():
        raise FloatingPointError("discretize: non-finite input")
    delta, B, _ = project(params, Tensor(x_n[None, :]))
    delta, B = delta.data[0], B.data[0]
    A = -np.exp(params.A_log.data)
    return np.exp(delta[:, None] * A), (delta * x_n)[:, None] * B[None, :]


def _check_state(params: SsmParams, x: Tensor, state: SsmState | None) -> None:
    if state is None:
        return
    want = x.shape[:-2] + (params.d_inner, params.d_state)
    if state.h.shape != want:
        raise T.ShapeError(f"ssm: state shape {state.h.shape} does not match {want}")


def scan_sequential(
    params: SsmParams, x: Tensor, state: SsmState | None = None
) -> tuple[Tensor, SsmState]:
    """Step-by-step recurrence; the returned state continues the stream."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_state(params, x, state)
    delta, B, C = project(params, x)
    y, h = T.selective_scan(x, delta, params.A(), B, C, None if state is None else state.h)
    done = (0 if state is None else state.n_processed) + x.shape[-2]
    return y, SsmState(h, done)


def linear_recurrence_parallel(a: np.ndarray, b: np.ndarray, axis: int = 0) -> np.ndarray:
    """All prefixes of ``h_n = a_n h_{n-1} + b_n`` (``h_{-1} = 0``) along ``axis``,
    computed by odd-even reduction of the associative pair operator."""
    return np.moveaxis(T.linear_recurrence(np.moveaxis(a, axis, 0), np.moveaxis(b, axis, 0)), 0, axis)


def scan_parallel(params: SsmParams, x: Tensor) -> Tensor:
    """Same result as :func:`scan_sequential` from a zero state, via a prefix scan."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    delta, B, C = project(params, x)
    d, Bd, Cd, xd = delta.data, B.data, C.data, x.data
    if not (np.isfinite(xd).all() and np.isfinite(d).all()):
        raise FloatingPointError("scan_parallel: non-finite input")
    A = -np.exp(params.A_log.data)
    a = np.exp(d[..., :, :, None] * A)
    b = (d * xd)[..., :, :, None] * Bd[..., :, None, :]
    h = linear_recurrence_parallel(a, b, axis=-3)
    # readout summed over the state index in ascending order, as the kernel does
    y = np.zeros(h.shape[:-1], dtype=h.dtype)
    for j in range(h.shape[-1]):
        y += Cd[..., :, None, j] * h[..., j]
    return Tensor(y)


def scan_chunked(
    params: SsmParams, chunks: Iterable, state: SsmState | None = None
) -> Iterator[Tensor]:
    """Stream ``y`` chunk by chunk; the state is threaded between chunks.

    ``state`` (if given) is advanced in place so callers can keep using it.
    """
    for chunk in chunks:
        chunk = chunk if isinstance(chunk, Tensor) else Tensor(chunk)
        if state is None:
            state = SsmState.zeros(chunk.shape[:-2], params.d_inner, params.d_state, chunk.dtype)
        y, new = scan_sequential(params, chunk, state)
        state.h, state.n_processed = new.h, new.n_processed
        yield y

