"""Mamba block and its causal (Uni) and non-causal (Bi) wrappers.

Block::

    Y' = SSM(SiLU(Conv(Linear_x(X)))) * SiLU(Linear_z(X))
    Y  = Linear_out(Y')

Uni wrapper: ``Y = Block(Proj_in(X)) + Residual(X)``; the residual is a
learnable linear map from the input width to the output width.

Bi wrapper: the input is projected to ``hidden``, run through a forward block
and through a second block on the time-reversed sequence, the two outputs are
concatenated (width ``2 * hidden``), a learnable linear residual at that width
is added, and a final linear layer maps to the output width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ssm import SsmParams, SsmState, init_ssm_params, scan_sequential
from .tensor import Tensor

__all__ = [
    "MambaBlockConfig",
    "BlockState",
    "MambaBlock",
    "UniMamba",
    "BiMamba",
    "Linear",
    "linear_init",
]


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return T.parameter(rng.uniform(-bound, bound, (fan_in, fan_out)))


class Linear:
    """Dense layer ``x @ W (+ b)``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = False):
        self.weight = linear_init(rng, d_in, d_out)
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + "weight": self.weight}
        if self.bias is not None:
            out[prefix + "bias"] = self.bias
        return out


@dataclass(frozen=True)
class MambaBlockConfig:
    d_model: int
    expand: int = 2
    d_conv: int = 4
    d_state: int = 16
    d_out: int | None = None

    def __post_init__(self):
        if self.expand < 1 or self.d_conv < 1 or self.d_state < 1 or self.d_model < 1:
            raise ValueError(f"invalid block dimensions: {self}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def width_out(self) -> int:
        return self.d_model if self.d_out is None else self.d_out


@dataclass
class BlockState:
    """Streaming carry for one block: conv input tail and SSM state."""

    conv_tail: np.ndarray
    ssm: SsmState

    def copy(self) -> BlockState:
        return BlockState(self.conv_tail.copy(), self.ssm.copy())

    @property
    def size(self) -> int:
        return self.conv_tail.size + self.ssm.h.size


class MambaBlock:
    def __init__(self, cfg: MambaBlockConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        d, di = cfg.d_model, cfg.d_inner
        self.in_x = linear_init(rng, d, di)
        self.in_z = linear_init(rng, d, di)
        bound = 1.0 / math.sqrt(cfg.d_conv)
        self.conv_w = T.parameter(rng.uniform(-bound, bound, (di, cfg.d_conv)))
        self.conv_b = T.parameter(rng.uniform(-bound, bound, di))
        self.ssm: SsmParams = init_ssm_params(di, cfg.d_state, rng=rng)
        self.out = linear_init(rng, di, cfg.width_out)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {
            prefix + "in_x": self.in_x,
            prefix + "in_z": self.in_z,
            prefix + "conv_w": self.conv_w,
            prefix + "conv_b": self.conv_b,
        }
        out.update(self.ssm.named_parameters(prefix + "ssm."))
        out[prefix + "out"] = self.out
        return out

    def init_state(self, lead: tuple[int, ...], dtype=np.float64) -> BlockState:
        di = self.cfg.d_inner
        return BlockState(
            np.zeros(lead + (self.cfg.d_conv - 1, di), dtype=dtype),
            SsmState.zeros(lead, di, self.cfg.d_state, dtype),
        )

    def forward(self, X: Tensor, state: BlockState | None = None) -> tuple[Tensor, BlockState]:
        """Run the block along axis ``-2`` of ``X: [..., L, d_model]``."""
        X = X if isinstance(X, Tensor) else Tensor(X)
        if X.shape[-1] != self.cfg.d_model:
            raise T.ShapeError(f"mamba block: input width {X.shape[-1]} != {self.cfg.d_model}")
        u = T.matmul(X, self.in_x)
        conv, tail = T.depthwise_causal_conv1d(
            u, self.conv_w, self.conv_b, None if state is None else state.conv_tail
        )
        y, ssm_state = scan_sequential(self.ssm, T.silu(conv), None if state is None else state.ssm)
        gate = T.silu(T.matmul(X, self.in_z))
        return T.matmul(T.mul(y, gate), self.out), BlockState(tail, ssm_state)

    def __call__(self, X: Tensor) -> Tensor:
        return self.forward(X)[0]


class UniMamba:
    """Causal wrapper; supports chunked streaming through :meth:`forward`."""

    causal = True

    def __init__(
        self,
        d_in: int,
        hidden: int,
        d_out: int,
        rng: np.random.Generator | None = None,
        expand: int = 2,
        d_conv: int = 4,
        d_state: int = 16,
    ):
        rng = rng or np.random.default_rng(0)
        self.d_in, self.hidden, self.d_out = d_in, hidden, d_out
        self.proj_in = linear_init(rng, d_in, hidden)
        self.block = MambaBlock(MambaBlockConfig(hidden, expand, d_conv, d_state, d_out), rng)
        self.residual = linear_init(rng, d_in, d_out)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + "proj_in": self.proj_in}
        out.update(self.block.named_parameters(prefix + "block."))
        out[prefix + "residual"] = self.residual
        return out

    def init_state(self, lead: tuple[int, ...], dtype=np.float64) -> BlockState:
        return self.block.init_state(lead, dtype)

    def forward(self, X: Tensor, state: BlockState | None = None) -> tuple[Tensor, BlockState]:
        X = X if isinstance(X, Tensor) else Tensor(X)
        if X.shape[-1] != self.d_in:
            raise T.ShapeError(f"uni-mamba: input width {X.shape[-1]} != {self.d_in}")
        if state is not None:
            want = X.shape[:-2] + (self.block.cfg.d_conv - 1, self.block.cfg.d_inner)
            if state.conv_tail.shape != want:
                raise T.ShapeError(
                    f"uni-mamba: stream state {state.conv_tail.shape} does not fit input {X.shape}"
                )
        y, new_state = self.block.forward(T.matmul(X, self.proj_in), state)
        return T.add(y, T.matmul(X, self.residual)), new_state

    def __call__(self, X: Tensor) -> Tensor:
        return self.forward(X)[0]


class BiMamba:
    causal = False

    def __init__(
        self,
        d_in: int,
        hidden: int,
        d_out: int,
        rng: np.random.Generator | None = None,
        expand: int = 2,
        d_conv: int = 4,
        d_state: int = 16,
    ):
        rng = rng or np.random.default_rng(0)
        self.d_in, self.hidden, self.d_out = d_in, hidden, d_out
        self.proj_in = linear_init(rng, d_in, hidden)
        cfg = MambaBlockConfig(hidden, expand, d_conv, d_state)
        self.fwd = MambaBlock(cfg, rng)
        self.bwd = MambaBlock(cfg, rng)
        self.residual = linear_init(rng, d_in, 2 * hidden)
        self.final = linear_init(rng, 2 * hidden, d_out)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + "proj_in": self.proj_in}
        out.update(self.fwd.named_parameters(prefix + "fwd."))
        out.update(self.bwd.named_parameters(prefix + "bwd."))
        out[prefix + "residual"] = self.residual
        out[prefix + "final"] = self.final
        return out

    def forward(self, X: Tensor, state=None) -> tuple[Tensor, None]:
        if state is not None:
            raise ValueError("bi-mamba is non-causal and cannot carry stream state")
        X = X if isinstance(X, Tensor) else Tensor(X)
        if X.shape[-1] != self.d_in:
            raise T.ShapeError(f"bi-mamba: input width {X.shape[-1]} != {self.d_in}")
        z = T.matmul(X, self.proj_in)
        ahead = self.fwd(z)
        behind = T.flip(self.bwd(T.flip(z, -2)), -2)
        both = T.add(T.concat([ahead, behind], -1), T.matmul(X, self.residual))
        return T.matmul(both, self.final), None

    def __call__(self, X: Tensor) -> Tensor:
        return self.forward(X)[0]
