"""The four-stage spatial/spectral enhancement cascade.

Stage 1, full-band spatial: the Re/Im parts of all channels at each bin,
processed along frequency within a frame (Bi-Mamba, then FC + ReLU).

Stage 2, narrow-band spatial: the stage-1 features concatenated with the
raw Re/Im features, processed along time for every bin with shared weights.

Stage 3, sub-band spectral: reference-channel magnitudes of the neighbouring
bins concatenated with the stage-2 output, processed along time.

Stage 4, full-band spectral: reference-channel magnitudes of the current and
past frames concatenated with the stage-3 output, processed along frequency
(Bi-Mamba); the two outputs are the Re/Im parts of the enhanced reference
spectrum.

Stages 2 and 3 use Uni-Mamba when the model is causal and Bi-Mamba otherwise.
Stages 1 and 4 always run along frequency and so never look at other frames.
"""

from __future__ import annotations

from collections import deque
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import BiMamba, BlockState, Linear, UniMamba
from .dsp import ComplexSpectrogram
from .serialize import load_weights, save_weights
from .tensor import Tensor

__all__ = [
    "McMambaConfig",
    "McMambaModel",
    "StreamContext",
    "ModeMismatchError",
    "assemble_fullband_spatial",
    "assemble_narrowband",
    "assemble_subband",
    "assemble_fullband_spectral",
    "subband_magnitudes",
    "context_magnitudes",
    "read_config",
    "write_config",
    "install_passthrough",
    "FULL_CONFIG",
    "TINY_CONFIG",
]

NORM_EPS = 1e-8


class ModeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class McMambaConfig:
    n_channels: int = 6
    n_bins: int = 257
    reference_channel: int = 4
    causal: bool = False
    d_out: tuple[int, int, int, int] = (64, 64, 64, 2)
    hidden: tuple[int, int, int, int] = (128, 256, 384, 128)
    n_neighbors: int = 3
    n_context: int = 5
    # "equation": bins f-N..f+N and frames t-C..t (2N+1 and C+1 values);
    # "text": 2N bins f-N..f+N-1 and C frames t-C+1..t
    window_rule: str = "equation"
    expand: int = 2
    d_conv: int = 4
    d_state: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.reference_channel < self.n_channels:
            raise ValueError(
                f"reference_channel {self.reference_channel} outside 0..{self.n_channels - 1}"
            )
        if len(self.d_out) != 4 or len(self.hidden) != 4:
            raise ValueError("d_out and hidden need one entry per stage")
        if self.d_out[3] != 2:
            raise ValueError(f"stage-4 output must be 2 (Re, Im), got {self.d_out[3]}")
        if min(self.d_out + self.hidden) < 1 or self.n_bins < 1:
            raise ValueError("all widths must be >= 1")
        if self.n_neighbors < 0 or self.n_context < 0:
            raise ValueError("n_neighbors and n_context must be >= 0")
        if self.window_rule not in ("equation", "text"):
            raise ValueError(f"unknown window_rule {self.window_rule!r}")
        if self.window_rule == "text" and (self.n_neighbors < 1 or self.n_context < 1):
            raise ValueError("window_rule 'text' needs n_neighbors >= 1 and n_context >= 1")

    @property
    def subband_offsets(self) -> list[int]:
        N = self.n_neighbors
        return list(range(-N, N + 1 if self.window_rule == "equation" else N))

    @property
    def context_offsets(self) -> list[int]:
        C = self.n_context
        return list(range(-C if self.window_rule == "equation" else -C + 1, 1))

    @property
    def stage_inputs(self) -> tuple[int, int, int, int]:
        M2 = 2 * self.n_channels
        return (
            M2,
            M2 + self.d_out[0],
            len(self.subband_offsets) + self.d_out[1],
            len(self.context_offsets) + self.d_out[2],
        )

    def replace(self, **kw) -> McMambaConfig:
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return McMambaConfig(**vals)


FULL_CONFIG = McMambaConfig()
TINY_CONFIG = McMambaConfig(d_out=(8, 8, 8, 2), hidden=(16, 16, 16, 16))


# --------------------------------------------------------------- features


def assemble_fullband_spatial(spec: ComplexSpectrogram) -> np.ndarray:
    """``[T, F, 2M]`` with ``[Re X1, Im X1, ..., Re XM, Im XM]`` per bin."""
    M, Tn, F = spec.shape
    x = np.empty((Tn, F, 2 * M), dtype=spec.re.dtype)
    x[..., 0::2] = np.moveaxis(spec.re, 0, -1)
    x[..., 1::2] = np.moveaxis(spec.im, 0, -1)
    return x


def assemble_narrowband(x1: np.ndarray, stage1_out) -> Tensor:
    """Per-bin time sequences ``[F, T, 2M + d1]``."""
    s1 = stage1_out if isinstance(stage1_out, Tensor) else Tensor(stage1_out)
    return T.swapaxes(T.concat([Tensor(x1), s1], -1), 0, 1)


def subband_magnitudes(mag: np.ndarray, offsets: list[int]) -> np.ndarray:
    """``mag: [T, F]`` to ``[F, T, len(offsets)]``; bins past the edges are zero."""
    Tn, F = mag.shape
    out = np.zeros((F, Tn, len(offsets)), dtype=mag.dtype)
    for j, o in enumerate(offsets):
        lo, hi = max(0, -o), min(F, F - o)
        if hi > lo:
            out[lo:hi, :, j] = mag[:, lo + o : hi + o].T
    return out


def context_magnitudes(
    mag: np.ndarray, offsets: list[int], history: np.ndarray | None = None
) -> np.ndarray:
    """``mag: [T, F]`` to ``[T, F, len(offsets)]`` of past-frame magnitudes.

    ``history`` supplies frames preceding ``mag`` (oldest first); missing
    frames are zero.
    """
    Tn, F = mag.shape
    depth = max(0, -min(offsets))
    past = np.zeros((depth, F), dtype=mag.dtype)
    if history is not None and depth:
        h = history[-depth:]
        past[depth - len(h) :] = h
    full = np.concatenate([past, mag], axis=0)
    out = np.empty((Tn, F, len(offsets)), dtype=mag.dtype)
    for j, o in enumerate(offsets):
        out[:, :, j] = full[depth + o : depth + o + Tn]
    return out


def assemble_subband(spec: ComplexSpectrogram, cfg: McMambaConfig, stage2_out) -> Tensor:
    """``[F, T, n_sub + d2]``; ``stage2_out`` is lane-major ``[F, T, d2]``."""
    mag = spec.magnitude()[cfg.reference_channel]
    s2 = stage2_out if isinstance(stage2_out, Tensor) else Tensor(stage2_out)
    return T.concat([Tensor(subband_magnitudes(mag, cfg.subband_offsets)), s2], -1)


def assemble_fullband_spectral(
    spec: ComplexSpectrogram, cfg: McMambaConfig, stage3_out, history: np.ndarray | None = None
) -> Tensor:
    """``[T, F, n_ctx + d3]``; ``stage3_out`` is frame-major ``[T, F, d3]``."""
    mag = spec.magnitude()[cfg.reference_channel]
    s3 = stage3_out if isinstance(stage3_out, Tensor) else Tensor(stage3_out)
    ctx = context_magnitudes(mag, cfg.context_offsets, history)
    return T.concat([Tensor(ctx), s3], -1)


# ----------------------------------------------------------------- model


@dataclass
class StreamContext:
    """Everything a causal model carries from one frame to the next."""

    stage2: BlockState
    stage3: BlockState
    mag_history: deque = field(default_factory=deque)
    norm_sum: float = 0.0
    n_frames: int = 0

    @property
    def size(self) -> int:
        """Number of floats held, independent of how many frames were seen."""
        hist = sum(h.size for h in self.mag_history)
        return self.stage2.size + self.stage3.size + hist + 1


def _frame_means(mag: np.ndarray) -> np.ndarray:
    # shared by offline and streaming paths so both reduce identically
    return np.add.reduce(mag, axis=-1) / mag.shape[-1]


class McMambaModel:
    def __init__(self, cfg: McMambaConfig = FULL_CONFIG, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng or np.random.default_rng(cfg.seed)
        d, h = cfg.d_out, cfg.hidden
        di = cfg.stage_inputs
        kw = dict(expand=cfg.expand, d_conv=cfg.d_conv, d_state=cfg.d_state)
        Temporal = UniMamba if cfg.causal else BiMamba
        self.stage1 = BiMamba(di[0], h[0], d[0], rng, **kw)
        self.fc1 = Linear(d[0], d[0], rng, bias=True)
        self.stage2 = Temporal(di[1], h[1], d[1], rng, **kw)
        self.fc2 = Linear(d[1], d[1], rng, bias=True)
        self.stage3 = Temporal(di[2], h[2], d[2], rng, **kw)
        self.fc3 = Linear(d[2], d[2], rng, bias=True)
        self.stage4 = BiMamba(di[3], h[3], d[3], rng, **kw)

    # ---- parameters

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in ("stage1", "fc1", "stage2", "fc2", "stage3", "fc3", "stage4"):
            out.update(getattr(self, name).named_parameters(name + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, weights: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(weights)
        extra = set(weights) - set(params)
        if missing or extra:
            raise ModeMismatchError(
                f"weights do not fit this model (missing {sorted(missing)[:3]}, "
                f"unexpected {sorted(extra)[:3]})"
            )
        for k, p in params.items():
            if weights[k].shape != p.shape:
                raise ModeMismatchError(f"{k}: shape {weights[k].shape} != {p.shape}")
            p.data[...] = weights[k]

    def save(self, path: str | Path) -> None:
        save_weights(path, self.state_dict())

    @classmethod
    def load(cls, path: str | Path, cfg: McMambaConfig) -> McMambaModel:
        model = cls(cfg)
        model.load_state_dict(load_weights(path))
        return model

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    # ---- normalization

    def input_scale(self, spec: ComplexSpectrogram) -> np.ndarray:
        """Per-frame positive scale ``[T]`` dividing the input spectrum.

        Non-causal: the utterance-mean reference magnitude. Causal: the
        running mean up to and including each frame.
        """
        mag = spec.magnitude()[self.cfg.reference_channel]
        means = _frame_means(mag)
        if self.cfg.causal:
            return np.cumsum(means) / np.arange(1, len(means) + 1) + NORM_EPS
        return np.full(len(means), means.sum() / len(means) + NORM_EPS)

    @staticmethod
    def normalize(spec: ComplexSpectrogram, scale: np.ndarray) -> ComplexSpectrogram:
        s = scale[None, :, None]
        return ComplexSpectrogram(
            spec.re / s, spec.im / s, spec.sample_rate, spec.hop, spec.window_len
        )

    # ---- forward

    def _check(self, spec: ComplexSpectrogram) -> None:
        M, _, F = spec.shape
        if M != self.cfg.n_channels or F != self.cfg.n_bins:
            raise ValueError(
                f"spectrogram is [{M} ch, {F} bins]; model expects "
                f"[{self.cfg.n_channels} ch, {self.cfg.n_bins} bins]"
            )

    def forward_stages(
        self, spec: ComplexSpectrogram, ctx: StreamContext | None = None
    ) -> dict[str, Tensor]:
        """Run the cascade on an already-normalized spectrogram.

        Returns every stage output in frame-major ``[T, F, d]`` layout under
        keys ``stage1`` .. ``stage4``. With ``ctx`` the temporal stages continue
        from (and advance) the stream state.
        """
        self._check(spec)
        x1 = assemble_fullband_spatial(spec)
        s1 = T.relu(self.fc1(self.stage1(Tensor(x1))))
        y2, st2 = self.stage2.forward(
            assemble_narrowband(x1, s1), None if ctx is None else ctx.stage2
        )
        s2 = T.relu(self.fc2(y2))
        y3, st3 = self.stage3.forward(
            assemble_subband(spec, self.cfg, s2), None if ctx is None else ctx.stage3
        )
        s3 = T.swapaxes(T.relu(self.fc3(y3)), 0, 1)
        history = None if ctx is None else np.array(ctx.mag_history) if ctx.mag_history else None
        s4 = self.stage4(assemble_fullband_spectral(spec, self.cfg, s3, history))
        if ctx is not None:
            ctx.stage2, ctx.stage3 = st2, st3
        return {"stage1": s1, "stage2": T.swapaxes(s2, 0, 1), "stage3": s3, "stage4": s4}

    def forward(self, spec: ComplexSpectrogram) -> Tensor:
        """Normalized spectrogram in, ``[T, F, 2]`` (Re, Im) out."""
        return self.forward_stages(spec)["stage4"]

    def enhance_offline(self, spec: ComplexSpectrogram) -> ComplexSpectrogram:
        """Enhanced reference-channel spectrogram ``[1, T, F]``."""
        self._check(spec)
        scale = self.input_scale(spec)
        out = self.forward(self.normalize(spec, scale)).data
        s = scale[:, None]
        return ComplexSpectrogram(
            (out[..., 0] * s)[None], (out[..., 1] * s)[None],
            spec.sample_rate, spec.hop, spec.window_len,
        )

    # ---- streaming

    def new_stream(self) -> StreamContext:
        if not self.cfg.causal:
            raise ModeMismatchError("streaming needs a causal model")
        F = self.cfg.n_bins
        return StreamContext(
            self.stage2.init_state((F,)),
            self.stage3.init_state((F,)),
            deque(maxlen=max(1, -min(self.cfg.context_offsets))),
        )

    def step(self, re: np.ndarray, im: np.ndarray, ctx: StreamContext) -> np.ndarray:
        """Enhance one frame (``re``, ``im``: ``[M, F]``); returns complex ``[F]``."""
        if not self.cfg.causal:
            raise ModeMismatchError("streaming needs a causal model")
        frame = ComplexSpectrogram(re[:, None, :], im[:, None, :])
        self._check(frame)
        mag = frame.magnitude()[self.cfg.reference_channel]
        ctx.norm_sum = ctx.norm_sum + _frame_means(mag)[0]
        ctx.n_frames += 1
        scale = np.array([ctx.norm_sum / ctx.n_frames + NORM_EPS])
        normed = self.normalize(frame, scale)
        out = self.forward_stages(normed, ctx)["stage4"].data[0]
        ctx.mag_history.append(normed.magnitude()[self.cfg.reference_channel][0])
        return out[:, 0] * scale[0] + 1j * (out[:, 1] * scale[0])

    def enhance_streaming(
        self, frames: Iterable, ctx: StreamContext | None = None
    ) -> Iterator[np.ndarray]:
        """Yield one enhanced complex frame ``[F]`` per input frame.

        ``frames`` yields complex ``[M, F]`` arrays or ``(re, im)`` pairs.
        """
        ctx = ctx if ctx is not None else self.new_stream()
        for fr in frames:
            if isinstance(fr, tuple):
                re, im = fr
            else:
                re, im = np.ascontiguousarray(fr.real), np.ascontiguousarray(fr.imag)
            yield self.step(re, im, ctx)


# ------------------------------------------------------------- passthrough


def _route(block, pairs: list[tuple[int, int, float]], n_out: int) -> None:
    """Make outputs ``0..n_out-1`` of a directional block a signed copy of inputs.

    ``pairs`` holds ``(input, output, sign)``; block outputs feeding those
    columns are cut so only the residual path reaches them.
    """
    res = block.residual.data
    res[:, :n_out] = 0.0
    for i, o, sign in pairs:
        res[i, o] = sign
    if isinstance(block, BiMamba):
        fin = block.final.data
        fin[:, :n_out] = 0.0
        fin[:n_out, :n_out] = np.eye(n_out)
    else:
        block.block.out.data[:, :n_out] = 0.0


def _identity_fc(fc: Linear, n: int) -> None:
    fc.weight.data[:, :n] = 0.0
    fc.weight.data[:n, :n] = np.eye(n)
    fc.bias.data[:n] = 0.0


def install_passthrough(model: McMambaModel, exact: bool = True) -> McMambaModel:
    """Wire a linear path carrying the reference channel's Re/Im to the output.

    The path runs through the residual maps of stages 2 to 4, with the
    stage FC layers splitting each part into ReLU-safe positive and negative
    halves. With ``exact`` every other weight is zeroed and the model
    reproduces its reference channel up to rounding; otherwise the random
    weights elsewhere are kept but the last projection starts from zero
    outside the path, so training begins at the noisy reference and the
    random branch fades in.
    """
    cfg = model.cfg
    if min(cfg.d_out[1], cfg.d_out[2]) < 4 or min(cfg.hidden[1:]) < 2:
        raise ValueError("passthrough needs stage 2/3 widths >= 4 and hidden >= 2")
    if exact:
        for p in model.parameters():
            p.data[...] = 0.0
    r = cfg.reference_channel
    _route(model.stage2, [(2 * r, 0, 1.0), (2 * r, 1, -1.0), (2 * r + 1, 2, 1.0), (2 * r + 1, 3, -1.0)], 4)
    _identity_fc(model.fc2, 4)
    n_sub = len(cfg.subband_offsets)
    _route(model.stage3, [(n_sub + k, k, 1.0) for k in range(4)], 4)
    _identity_fc(model.fc3, 4)
    n_ctx = len(cfg.context_offsets)
    st4 = model.stage4
    st4.residual.data[:, :4] = 0.0
    for k in range(4):
        st4.residual.data[n_ctx + k, k] = 1.0
    st4.final.data[...] = 0.0
    st4.final.data[:4, :] = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
    return model


# ------------------------------------------------------------------ config


_TUPLE_KEYS = {"d_out", "hidden"}
_BOOL_KEYS = {"causal"}
_STR_KEYS = {"window_rule"}


def write_config(path: str | Path, cfg: McMambaConfig) -> None:
    lines = ["# mcmamba model config"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _TUPLE_KEYS:
            v = ", ".join(str(x) for x in v)
        elif f.name in _BOOL_KEYS:
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_config(path: str | Path) -> McMambaConfig:
    known = {f.name for f in fields(McMambaConfig)}
    vals: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        if key in _TUPLE_KEYS:
            vals[key] = tuple(int(x) for x in value.split(","))
        elif key in _BOOL_KEYS:
            if value.lower() not in ("true", "false"):
                raise ValueError(f"{path}:{lineno}: {key} must be true or false")
            vals[key] = value.lower() == "true"
        elif key in _STR_KEYS:
            vals[key] = value
        else:
            vals[key] = int(value)
    return McMambaConfig(**vals)
