"""Invariant suite behind ``mcmamba verify``.

Each check returns a :class:`CheckResult`; the CLI prints them as a matrix
and exits non-zero if any failed.
"""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import BiMamba, UniMamba
from .dsp import ComplexSpectrogram, StftConfig, fft, hann_periodic, istft, naive_dft, stft
from .model import McMambaConfig, McMambaModel
from .ssm import SsmState, init_ssm_params, scan_chunked, scan_parallel, scan_sequential
from .train import spectral_loss

CHECKS = ("scan", "causality", "streaming", "stft", "gradcheck")
FAULTS = ("causality",)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def random_spectrogram(rng: np.random.Generator, M: int, T_: int, F: int) -> ComplexSpectrogram:
    return ComplexSpectrogram(rng.standard_normal((M, T_, F)), rng.standard_normal((M, T_, F)))


def small_model_config(causal: bool, **kw) -> McMambaConfig:
    base = dict(
        n_channels=3, n_bins=17, reference_channel=1, causal=causal,
        d_out=(8, 8, 8, 2), hidden=(8, 8, 8, 8), d_state=4,
    )
    base.update(kw)
    return McMambaConfig(**base)


def random_partition(rng: np.random.Generator, L: int) -> list[int]:
    cuts = np.sort(rng.choice(np.arange(1, L), size=rng.integers(0, min(L - 1, 12) + 1), replace=False)) if L > 1 else []
    edges = [0, *[int(c) for c in cuts], L]
    return [b - a for a, b in zip(edges[:-1], edges[1:])]


def scan_agreement(rng: np.random.Generator, L: int, d: int, s: int) -> tuple[float, bool]:
    """(parallel-vs-sequential relative error, chunked run bit-exact?)."""
    params = init_ssm_params(d, s, rng=rng)
    x = rng.standard_normal((L, d))
    seq, _ = scan_sequential(params, x)
    par = scan_parallel(params, x)
    scale = max(np.abs(seq.data).max(), 1e-300)
    rel = float(np.abs(par.data - seq.data).max() / scale)
    sizes = random_partition(rng, L)
    chunks = np.split(x, np.cumsum(sizes)[:-1])
    streamed = np.concatenate(
        [y.data for y in scan_chunked(params, chunks, SsmState.zeros((), d, s))], axis=0
    )
    return rel, bool(np.array_equal(streamed, seq.data))


def prefix_unchanged(
    fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, t0: int, rng, axis: int = 0, out_axis: int | None = None
) -> bool:
    """Perturb ``x`` at positions > ``t0`` along ``axis``; is output[..t0] identical?"""
    out_axis = axis if out_axis is None else out_axis
    base = fn(x)
    y = x.copy()
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(t0 + 1, None)
    y[tuple(sl)] += rng.standard_normal(y[tuple(sl)].shape)
    out = fn(y)
    keep = [slice(None)] * base.ndim
    keep[out_axis] = slice(0, t0 + 1)
    return bool(np.array_equal(base[tuple(keep)], out[tuple(keep)]))


def causal_enhance_fn(model: McMambaModel, M: int, F: int, fault: str | None = None):
    """Waveform-free causal probe: spectrogram planes in, enhanced planes out."""

    def run(planes: np.ndarray) -> np.ndarray:
        spec = ComplexSpectrogram(planes[0], planes[1])
        if fault == "causality":
            # injected bug: processing runs over the reversed utterance
            spec = ComplexSpectrogram(spec.re[:, ::-1].copy(), spec.im[:, ::-1].copy())
            out = model.enhance_offline(spec)
            return np.stack([out.re[0, ::-1], out.im[0, ::-1]])
        out = model.enhance_offline(spec)
        return np.stack([out.re[0], out.im[0]])

    return run


# ------------------------------------------------------------------ checks


def check_scan(rng, fault=None, n_cases: int = 200) -> CheckResult:
    worst, exact = 0.0, True
    for _ in range(n_cases):
        L, d, s = int(rng.integers(1, 200)), int(rng.integers(1, 9)), int(rng.integers(1, 17))
        rel, ok = scan_agreement(rng, L, d, s)
        worst, exact = max(worst, rel), exact and ok
    passed = worst < 1e-10 and exact
    return CheckResult("scan", passed, f"{n_cases} cases, max rel err {worst:.2e}, chunked exact={exact}")


def check_causality(rng, fault=None, n_trials: int = 50) -> CheckResult:
    uni = UniMamba(3, 4, 3, rng, d_state=4)
    bi = BiMamba(3, 4, 3, rng, d_state=4)
    L = 12
    uni_ok = all(
        prefix_unchanged(lambda x: uni(x).data, rng.standard_normal((L, 3)), int(rng.integers(0, L - 1)), rng)
        for _ in range(n_trials)
    )
    witness = any(
        not prefix_unchanged(lambda x: bi(x).data, rng.standard_normal((L, 3)), int(rng.integers(0, L - 1)), rng)
        for _ in range(n_trials)
    )
    cfg = small_model_config(True)
    model = McMambaModel(cfg, rng)
    run = causal_enhance_fn(model, cfg.n_channels, cfg.n_bins, fault)
    T_ = 8
    model_ok = all(
        prefix_unchanged(run, rng.standard_normal((2, cfg.n_channels, T_, cfg.n_bins)), int(rng.integers(0, T_ - 1)), rng, axis=2, out_axis=1)
        for _ in range(n_trials)
    )
    passed = uni_ok and model_ok and witness
    return CheckResult(
        "causality", passed, f"{n_trials} trials, uni prefix-exact={uni_ok}, model prefix-exact={model_ok}, bi witness={witness}"
    )


def check_streaming(rng, fault=None, n_fixtures: int = 10) -> CheckResult:
    cfg = small_model_config(True)
    model = McMambaModel(cfg, rng)
    ok = True
    for _ in range(n_fixtures):
        spec = random_spectrogram(rng, cfg.n_channels, int(rng.integers(3, 10)), cfg.n_bins)
        off = model.enhance_offline(spec).complex()[0]
        frames = [(spec.re[:, t], spec.im[:, t]) for t in range(spec.shape[1])]
        streamed = np.stack(list(model.enhance_streaming(frames)))
        ok = ok and np.array_equal(streamed.real, off.real) and np.array_equal(streamed.imag, off.imag)
    return CheckResult("streaming", bool(ok), f"{n_fixtures} fixtures, frame-by-frame == offline: {ok}")


def check_stft(rng, fault=None) -> CheckResult:
    cfg = StftConfig()
    x = rng.standard_normal(16000)
    y = istft(stft(x, cfg))
    a, b = cfg.window_len, len(y) - cfg.window_len
    rt = float(np.abs(y[a:b] - x[a:b]).max() / np.abs(x[a:b]).max())
    fft_err = 0.0
    n = 2
    while n <= 512:
        v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        ref = naive_dft(v)
        fft_err = max(fft_err, float(np.abs(fft(v) - ref).max() / np.abs(ref).max()))
        n *= 2
    dc = stft(np.ones(4096), cfg).magnitude()[0, 1:-1]
    dc_ok = bool(np.all(dc[:, 0] == hann_periodic(512).sum()) and hann_periodic(512).sum() == 256.0)
    passed = rt < 1e-10 and fft_err < 1e-9 and dc_ok
    return CheckResult("stft", passed, f"round-trip {rt:.2e}, fft vs dft {fft_err:.2e}, DC bin exact={dc_ok}")


def check_gradcheck(rng, fault=None, samples: int = 2) -> CheckResult:
    cfg = small_model_config(False, n_bins=7)
    model = McMambaModel(cfg, rng)
    spec = random_spectrogram(rng, cfg.n_channels, 4, cfg.n_bins)
    target = rng.standard_normal((4, cfg.n_bins, 2))
    params = model.parameters()
    err = T.gradcheck(lambda: spectral_loss(model.forward(spec), target), params, samples_per_tensor=samples, rng=rng)
    return CheckResult("gradcheck", err < 1e-4, f"{len(params)} tensors, max rel err {err:.2e}")


_RUNNERS = {
    "scan": check_scan,
    "causality": check_causality,
    "streaming": check_streaming,
    "stft": check_stft,
    "gradcheck": check_gradcheck,
}


def run_suite(only: list[str] | None = None, seed: int = 0, fault: str | None = None) -> list[CheckResult]:
    names = only or list(CHECKS)
    unknown = set(names) - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown checks {sorted(unknown)}; choose from {CHECKS}")
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    results = []
    for name in names:
        rng = np.random.default_rng([seed, CHECKS.index(name)])
        t0 = time.perf_counter()
        res = _RUNNERS[name](rng, fault)
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
