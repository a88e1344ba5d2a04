"""Toy-scale training (Adam, per-epoch exponential LR decay) and SI-SDR scoring."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataset import Utterance
from .dsp import ComplexSpectrogram, StftConfig, istft, stft
from .model import McMambaConfig, McMambaModel, install_passthrough
from .serialize import save_weights
from .tensor import Tensor

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainingDiverged",
    "TrainResult",
    "spectral_loss",
    "adam_step",
    "lr_schedule",
    "si_sdr",
    "prepare",
    "train_toy",
    "evaluate",
]

log = logging.getLogger(__name__)

SI_SDR_CAP = 60.0


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    decay: float = 0.992
    max_epochs: int = 20
    batch_size: int = 1
    seed: int = 0
    alpha_ri: float = 0.5
    alpha_mag: float = 0.5
    init: str = "random"  # or "passthrough": random weights plus a reference-channel path

    def __post_init__(self):
        if self.init not in ("random", "passthrough"):
            raise ValueError(f"unknown init {self.init!r}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


def lr_schedule(epoch: int, lr0: float = 1e-3, decay: float = 0.992) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * decay**epoch


def spectral_loss(pred: Tensor, target: np.ndarray, alpha_ri: float = 0.5, alpha_mag: float = 0.5) -> Tensor:
    """L1 on the Re/Im planes plus L1 on magnitudes; both are ``[..., 2]``."""
    target = np.asarray(target)
    if pred.shape != target.shape or pred.shape[-1] != 2:
        raise T.ShapeError(f"loss: prediction {pred.shape} vs target {target.shape}")
    ri = T.mean_all(T.absolute(T.sub(pred, Tensor(target))))
    tmag = np.sqrt((target * target).sum(-1))
    mag = T.mean_all(T.absolute(T.sub(T.norm_last(pred), Tensor(tmag))))
    return T.add(T.scale(ri, alpha_ri), T.scale(mag, alpha_mag))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float
) -> AdamState:
    """In-place bias-corrected Adam update of ``params``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise T.ShapeError(f"adam: gradient {g.shape} for {name} of shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def si_sdr(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Scale-invariant SDR in dB, capped at +60 when the residual vanishes."""
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    energy = np.dot(ref, ref)
    if energy == 0:
        raise ValueError("reference signal is all zeros")
    alpha = np.dot(est, ref) / energy
    proj = alpha * ref
    resid = proj - est
    num, den = np.dot(proj, proj), np.dot(resid, resid)
    if den <= num * 10 ** (-SI_SDR_CAP / 10):
        return SI_SDR_CAP
    return float(10 * math.log10(num / den))


@dataclass
class _Example:
    spec: ComplexSpectrogram  # normalized noisy input
    target: np.ndarray  # [T, F, 2], normalized like the input
    noisy_spec: ComplexSpectrogram  # raw, for evaluation
    target_wave: np.ndarray
    noisy_ref_wave: np.ndarray


def prepare(model: McMambaModel, utt: Utterance, cfg: StftConfig | None = None) -> _Example:
    cfg = cfg or StftConfig(sample_rate=utt.noisy.sample_rate)
    noisy = stft(utt.noisy.samples, cfg)
    tgt = stft(utt.target[None, :], cfg)
    scale = model.input_scale(noisy)
    target = np.stack([tgt.re[0], tgt.im[0]], -1) / scale[:, None, None]
    r = model.cfg.reference_channel
    return _Example(
        model.normalize(noisy, scale), target, noisy, utt.target, utt.noisy.samples[r]
    )


def evaluate(model: McMambaModel, examples: list[_Example]) -> tuple[float, float]:
    """Mean (enhanced SI-SDR, noisy SI-SDR) over ``examples``."""
    enh, base = [], []
    for ex in examples:
        wave = istft(model.enhance_offline(ex.noisy_spec))
        n = len(wave)
        enh.append(si_sdr(wave, ex.target_wave[:n]))
        base.append(si_sdr(ex.noisy_ref_wave[:n], ex.target_wave[:n]))
    return float(np.mean(enh)), float(np.mean(base))


@dataclass
class TrainResult:
    model: McMambaModel
    step_losses: list[float]
    epoch_losses: list[float]
    val_sisdr: list[float]
    noisy_val_sisdr: float
    best_epoch: int
    lrs: list[float]

    @property
    def best_val_sisdr(self) -> float:
        return self.val_sisdr[self.best_epoch] if self.val_sisdr else float("nan")


LOG_HEADER = "epoch\tstep\tlr\tloss\tval_sisdr"


def train_toy(
    model_cfg: McMambaConfig,
    train: list[Utterance],
    val: list[Utterance] | None,
    train_cfg: TrainConfig,
    log_path: str | Path | None = None,
    checkpoint: str | Path | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Train from scratch; the returned model holds the best-validation weights.

    Without a validation set the final weights are kept. Each log line is
    ``epoch step lr loss val_sisdr`` (tab-separated; ``val_sisdr`` is filled
    on the last step of an epoch).
    """
    model = McMambaModel(model_cfg.replace(seed=train_cfg.seed))
    if train_cfg.init == "passthrough":
        install_passthrough(model, exact=False)
    params = model.named_parameters()
    train_ex = [prepare(model, u) for u in train]
    val_ex = [prepare(model, u) for u in val] if val else []
    order_rng = np.random.default_rng(train_cfg.seed)
    adam = AdamState()
    result = TrainResult(model, [], [], [], float("nan"), 0, [])
    best_weights = model.state_dict()
    best = -math.inf
    lines = [LOG_HEADER]
    step = 0
    if val_ex:
        _, result.noisy_val_sisdr = evaluate(model, val_ex)

    for epoch in range(train_cfg.max_epochs):
        lr = lr_schedule(epoch, train_cfg.lr, train_cfg.decay)
        result.lrs.append(lr)
        order = order_rng.permutation(len(train_ex))
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            batch = [train_ex[i] for i in order[start : start + train_cfg.batch_size]]
            grads: dict[str, np.ndarray] = {}
            total = 0.0
            for ex in batch:
                with T.fast_reduction(), T.Tape() as tape:
                    loss = spectral_loss(
                        model.forward(ex.spec), ex.target, train_cfg.alpha_ri, train_cfg.alpha_mag
                    )
                    for p in params.values():
                        p.grad = None
                    T.backward(tape, loss)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(f"epoch {epoch} step {step}: loss is {value}")
                total += value
                for name, p in params.items():
                    if p.grad is not None:
                        g = p.grad / len(batch)
                        grads[name] = grads[name] + g if name in grads else g
            adam_step(params, grads, adam, lr)
            mean_loss = total / len(batch)
            losses.append(mean_loss)
            result.step_losses.append(mean_loss)
            step += 1
            lines.append(f"{epoch}\t{step}\t{lr:.6e}\t{mean_loss:.6e}\t")
            if max_steps is not None and step >= max_steps:
                break
        result.epoch_losses.append(float(np.mean(losses)))
        if val_ex:
            score, _ = evaluate(model, val_ex)
            result.val_sisdr.append(score)
            lines[-1] += f"{score:.4f}"
            if score > best:
                best, best_weights, result.best_epoch = score, model.state_dict(), epoch
            log.info("epoch %d lr %.3e loss %.4f val SI-SDR %.2f dB", epoch, lr, result.epoch_losses[-1], score)
        else:
            best_weights, result.best_epoch = model.state_dict(), epoch
        if max_steps is not None and step >= max_steps:
            break

    model.load_state_dict(best_weights)
    if checkpoint is not None:
        save_weights(checkpoint, best_weights)
    if log_path is not None:
        Path(log_path).write_text("\n".join(lines) + "\n")
    return result
