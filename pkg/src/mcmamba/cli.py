"""``mcmamba`` command line.

Exit codes: 0 success, 1 a check failed, 2 bad invocation or unusable input.
Tables go to stdout; ``--json`` switches every subcommand to JSON lines
(one object per row, plus a final ``{"summary": ...}`` object).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, WavError, read_wav, write_wav
from .dataset import SimSpec, harmonic_vowel, make_noise, simulate_multichannel, toy_corpus
from .dsp import StftConfig, StreamingIstft, StreamingStft, istft, stft
from .model import TINY_CONFIG, McMambaModel, ModeMismatchError, read_config, write_config
from .ssm import SsmState, init_ssm_params, scan_chunked, scan_parallel, scan_sequential
from .train import TrainConfig, TrainingDiverged, si_sdr, train_toy

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("mcmamba")


class UsageError(Exception):
    pass


class Reporter:
    """Collects rows; prints an aligned table or JSON lines."""

    def __init__(self, as_json: bool, stream=None):
        self.as_json = as_json
        self.out = stream or sys.stdout

    def rows(self, rows: list[dict], columns: list[str] | None = None) -> None:
        if not rows:
            return
        if self.as_json:
            for r in rows:
                print(_dumps(r), file=self.out)
            return
        cols = columns or list(rows[0])
        cells = [[_fmt(r.get(c, ""), c in _VERDICT_KEYS) for c in cols] for r in rows]
        widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
        print("  ".join(c.ljust(w) for c, w in zip(cols, widths)), file=self.out)
        for row in cells:
            print("  ".join(v.ljust(w) for v, w in zip(row, widths)), file=self.out)

    def line(self, text: str, **fields) -> None:
        if self.as_json:
            print(_dumps(fields), file=self.out)
        else:
            print(text, file=self.out)

    def summary(self, **fields) -> None:
        if self.as_json:
            print(_dumps({"summary": fields}), file=self.out)


def _finite(v):
    # strict JSON has no inf/nan literals
    if isinstance(v, dict):
        return {k: _finite(x) for k, x in v.items()}
    if isinstance(v, (float, np.floating)) and not math.isfinite(v):
        return str(float(v))
    return v


def _dumps(obj) -> str:
    return json.dumps(_finite(obj), default=_jsonable, allow_nan=False)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(type(v))


_VERDICT_KEYS = {"passed", "within_budget"}


def _fmt(v, verdict: bool = False) -> str:
    if isinstance(v, bool):
        return ("PASS" if v else "FAIL") if verdict else str(v).lower()
    if isinstance(v, (float, np.floating)):
        if v == 0 or (1e-3 <= abs(v) < 1e6):
            return f"{v:.4f}"
        return f"{v:.3e}"
    return str(v)


# ------------------------------------------------------------ subcommands


def _load_model(args) -> McMambaModel:
    cfg = read_config(args.config)
    if getattr(args, "causal", False) and not cfg.causal:
        raise ModeMismatchError(f"--causal requested but {args.config} describes a non-causal model")
    return McMambaModel.load(args.weights, cfg)


def _check_channels(buf: AudioBuffer, model: McMambaModel, path) -> None:
    if buf.n_channels != model.cfg.n_channels:
        raise UsageError(f"{path} has {buf.n_channels} channels; config expects {model.cfg.n_channels}")


def cmd_enhance(args, rep: Reporter) -> int:
    model = _load_model(args)
    buf = read_wav(args.inp)
    _check_channels(buf, model, args.inp)
    cfg = StftConfig(sample_rate=buf.sample_rate)
    if cfg.n_bins != model.cfg.n_bins:
        raise UsageError(f"STFT gives {cfg.n_bins} bins; config expects {model.cfg.n_bins}")
    wave = istft(model.enhance_offline(stft(buf.samples, cfg)))
    write_wav(args.out, AudioBuffer(wave[None, :], buf.sample_rate))
    row = {"out": str(args.out), "samples": len(wave), "causal": model.cfg.causal}
    if args.ref:
        ref = read_wav(args.ref).samples[0][: len(wave)]
        row["si_sdr_db"] = si_sdr(wave[: len(ref)], ref)
    rep.rows([row])
    return EXIT_OK


def stream_file(model: McMambaModel, samples: np.ndarray, chunk: int, cfg: StftConfig):
    """Hop-wise streaming run; returns (waveform, per-frame compute ms)."""
    ana, syn = StreamingStft(samples.shape[0], cfg), StreamingIstft(cfg)
    # warm-up on a throwaway context so JIT compilation is not timed
    n_bins = cfg.n_bins
    model.step(np.zeros((samples.shape[0], n_bins)), np.zeros((samples.shape[0], n_bins)), model.new_stream())
    ctx = model.new_stream()
    pieces, lat = [], []
    for start in range(0, samples.shape[1], chunk):
        for frame in ana.push(samples[:, start : start + chunk]):
            t0 = time.perf_counter()
            out = model.step(np.ascontiguousarray(frame.real), np.ascontiguousarray(frame.imag), ctx)
            pieces.append(syn.push(out))
            lat.append((time.perf_counter() - t0) * 1e3)
    if pieces:
        pieces.append(syn.flush())
    return (np.concatenate(pieces) if pieces else np.zeros(0)), np.array(lat)


def cmd_stream(args, rep: Reporter) -> int:
    model = _load_model(args)
    if not model.cfg.causal:
        raise ModeMismatchError("stream needs causal weights; the config is non-causal")
    buf = read_wav(args.inp)
    _check_channels(buf, model, args.inp)
    cfg = StftConfig(sample_rate=buf.sample_rate)
    chunk = max(1, int(round(args.frame_ms * buf.sample_rate / 1000)))
    wave, lat = stream_file(model, buf.samples, chunk, cfg)
    if args.out:
        write_wav(args.out, AudioBuffer(wave[None, :], buf.sample_rate))
    ok = True
    if not args.no_verify:
        offline = istft(model.enhance_offline(stft(buf.samples, cfg)))
        ok = offline.shape == wave.shape and bool(np.array_equal(offline, wave))
        rep.line(f"streaming==offline: {'PASS' if ok else 'FAIL'}", check="streaming==offline", passed=ok)
    p50, p99 = (float(np.percentile(lat, q)) for q in (50, 99)) if len(lat) else (0.0, 0.0)
    rep.rows([{
        "frames": len(lat), "chunk_samples": chunk, "p50_ms": p50, "p99_ms": p99,
        "budget_ms": args.budget_ms, "within_budget": p99 < args.budget_ms,
    }])
    if args.figure and len(lat):
        from .plotting import plot_latency

        plot_latency(lat, args.budget_ms, args.figure)
    rep.summary(passed=ok)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_train_toy(args, rep: Reporter) -> int:
    mcfg = read_config(args.config) if args.config else TINY_CONFIG.replace(causal=args.causal)
    spec = SimSpec(n_channels=mcfg.n_channels, delays=SimSpec().delays[: mcfg.n_channels],
                   reference_channel=mcfg.reference_channel) if mcfg.n_channels == 6 else None
    if spec is None:
        raise UsageError("train-toy simulates a 6-microphone array; use a 6-channel config")
    utts = toy_corpus(args.n_utts, seed=args.seed, duration_s=args.duration, spec=spec)
    n_val = int(round(args.val_fraction * len(utts)))
    if n_val >= len(utts):
        raise UsageError("validation split leaves no training utterances")
    train, val = utts[n_val:], utts[:n_val]
    tcfg = TrainConfig(lr=args.lr, decay=args.decay, max_epochs=args.epochs, seed=args.seed, init=args.init)
    res = train_toy(mcfg, train, val, tcfg, args.log, args.checkpoint, args.max_steps)
    if args.config_out:
        write_config(args.config_out, mcfg)
    rows = [
        {"epoch": e, "lr": lr, "loss": loss, "val_sisdr_db": res.val_sisdr[e] if e < len(res.val_sisdr) else float("nan")}
        for e, (lr, loss) in enumerate(zip(res.lrs, res.epoch_losses))
    ]
    rep.rows(rows)
    improved = bool(val) and res.best_val_sisdr > res.noisy_val_sisdr
    rep.line(
        f"best epoch {res.best_epoch}: val SI-SDR {res.best_val_sisdr:.2f} dB (noisy {res.noisy_val_sisdr:.2f} dB)",
        best_epoch=res.best_epoch, best_val_sisdr_db=res.best_val_sisdr, noisy_val_sisdr_db=res.noisy_val_sisdr,
        improved=improved,
    )
    if args.figure:
        from .plotting import plot_training

        plot_training(res.step_losses, res.val_sisdr, res.noisy_val_sisdr, args.figure)
    return EXIT_OK


def cmd_simulate(args, rep: Reporter) -> int:
    rng = np.random.default_rng(args.seed)
    if args.clean:
        src = read_wav(args.clean)
        clean, sr = src.samples[0], src.sample_rate
    else:
        sr = 16000
        clean = harmonic_vowel(int(round(args.duration * sr)), sr, rng)
    spec = SimSpec(snr_db=(args.snr, args.snr), noise=args.noise, seed=args.seed)
    noise = make_noise(spec.noise, spec.n_channels, len(clean), rng, sr)
    noisy, target, snr = simulate_multichannel(clean, noise, spec, sr)
    write_wav(args.out, noisy)
    if args.target_out:
        write_wav(args.target_out, AudioBuffer(target[None, :], sr))
    r = spec.reference_channel
    resid = noisy.samples[r] - target
    achieved = math.inf if not resid.any() else 10 * math.log10(np.mean(target**2) / np.mean(resid**2))
    rep.rows([{"out": str(args.out), "channels": noisy.n_channels, "samples": len(noisy),
               "target_snr_db": snr, "achieved_snr_db": achieved}])
    return EXIT_OK


def cmd_gradcheck(args, rep: Reporter) -> int:
    from . import tensor as T
    from .train import spectral_loss

    rng = np.random.default_rng(args.seed)
    cfg = TINY_CONFIG.replace(n_channels=args.channels, reference_channel=0, n_bins=args.bins, causal=args.causal)
    model = McMambaModel(cfg, rng)
    spec = stft(rng.standard_normal((cfg.n_channels, 256 * (args.frames + 1))), StftConfig())
    spec = type(spec)(spec.re[:, :, : cfg.n_bins], spec.im[:, :, : cfg.n_bins])
    spec = model.normalize(spec, model.input_scale(spec))
    target = rng.standard_normal(spec.shape[1:] + (2,))
    rows, worst = [], 0.0
    for name, p in model.named_parameters().items():
        err = T.gradcheck(lambda: spectral_loss(model.forward(spec), target), [p],
                          samples_per_tensor=args.samples, rng=rng)
        worst = max(worst, err)
        rows.append({"tensor": name, "shape": "x".join(map(str, p.shape)), "rel_err": err, "passed": err < args.tol})
    rep.rows(rows)
    ok = worst < args.tol
    rep.line(f"gradcheck: {len(rows)} tensors, max rel err {worst:.2e} -> {'PASS' if ok else 'FAIL'}",
             tensors=len(rows), max_rel_err=worst, passed=ok)
    return EXIT_OK if ok else EXIT_FAIL


def _time(fn, repeats: int) -> tuple[float, object]:
    best, out = math.inf, None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cmd_bench_scan(args, rep: Reporter) -> int:
    rng = np.random.default_rng(args.seed)
    params = init_ssm_params(args.width, args.state, rng=rng)
    rows, ok = [], True
    for L in args.len:
        x = rng.standard_normal((L, args.width))
        t_seq, (ref, _) = _time(lambda: scan_sequential(params, x), args.repeats)
        ref = ref.data
        scale = max(float(np.abs(ref).max()), 1e-300)
        for mode in args.mode:
            if mode == "seq":
                t, y = t_seq, ref
            elif mode == "par":
                t, y = _time(lambda: scan_parallel(params, x).data, args.repeats)
            else:
                chunks = [x[i : i + args.chunk] for i in range(0, L, args.chunk)]
                t, y = _time(lambda: np.concatenate([c.data for c in scan_chunked(
                    params, chunks, SsmState.zeros((), args.width, args.state))]), args.repeats)
            dev = float(np.abs(y - ref).max() / scale)
            passed = dev < 1e-10
            ok = ok and passed
            rows.append({"mode": mode, "len": L, "width": args.width, "state": args.state,
                         "work": L * args.width * args.state, "seconds": t,
                         "steps_per_s": L / t if t > 0 else math.inf, "max_rel_dev": dev, "passed": passed})
    rep.rows(rows)
    if args.figure:
        from .plotting import plot_scan_bench

        plot_scan_bench(rows, args.figure)
    rep.summary(passed=ok)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_verify(args, rep: Reporter) -> int:
    from .verify import run_suite

    try:
        results = run_suite(args.only, seed=args.seed, fault=args.inject_fault)
    except ValueError as e:
        raise UsageError(str(e)) from e
    rep.rows([{"check": r.name, "passed": r.passed, "seconds": r.seconds, "detail": r.detail} for r in results],
             ["check", "passed", "seconds", "detail"])
    ok = all(r.passed for r in results)
    rep.summary(passed=ok, n_checks=len(results))
    return EXIT_OK if ok else EXIT_FAIL


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="JSON lines instead of tables")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mcmamba", description="Multichannel Mamba speech enhancement toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def model_args(sp, need_out: bool):
        sp.add_argument("--in", dest="inp", required=True, type=Path)
        sp.add_argument("--weights", required=True, type=Path)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--out", required=need_out, type=Path)
        sp.add_argument("--causal", action="store_true", help="require causal weights")

    sp = sub.add_parser("enhance", parents=[common], help="enhance a multichannel WAV offline")
    model_args(sp, True)
    sp.add_argument("--ref", type=Path, help="clean reference WAV for SI-SDR")
    sp.set_defaults(func=cmd_enhance)

    sp = sub.add_parser("stream", parents=[common], help="frame-by-frame causal enhancement")
    model_args(sp, False)
    sp.add_argument("--frame-ms", type=float, default=16.0, help="input chunk length")
    sp.add_argument("--budget-ms", type=float, default=16.0)
    sp.add_argument("--no-verify", action="store_true", help="skip the offline comparison")
    sp.add_argument("--figure", type=Path, help="latency plot (PNG)")
    sp.set_defaults(func=cmd_stream)

    sp = sub.add_parser("train-toy", parents=[common], help="train on a simulated toy corpus")
    sp.add_argument("--config", type=Path, help="model config (default: tiny)")
    sp.add_argument("--causal", action="store_true")
    sp.add_argument("--n-utts", type=int, default=20)
    sp.add_argument("--val-fraction", type=float, default=0.2)
    sp.add_argument("--duration", type=float, default=0.5, help="seconds per utterance")
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--decay", type=float, default=0.992)
    sp.add_argument("--init", choices=("random", "passthrough"), default="passthrough")
    sp.add_argument("--log", type=Path)
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--config-out", type=Path)
    sp.add_argument("--figure", type=Path, help="loss / SI-SDR plot (PNG)")
    sp.set_defaults(func=cmd_train_toy)

    sp = sub.add_parser("simulate", parents=[common], help="write a simulated 6-channel mixture")
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--clean", type=Path, help="mono clean WAV (default: synthetic vowel)")
    sp.add_argument("--duration", type=float, default=1.0)
    sp.add_argument("--noise", default="white", help="white, babble or a 6-channel WAV path")
    sp.add_argument("--snr", type=float, default=5.0)
    sp.add_argument("--target-out", type=Path)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of a tiny model")
    sp.add_argument("--bins", type=int, default=9)
    sp.add_argument("--channels", type=int, default=2)
    sp.add_argument("--frames", type=int, default=3)
    sp.add_argument("--samples", type=int, default=3, help="entries probed per tensor")
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--causal", action="store_true")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("bench-scan", parents=[common], help="selective-scan throughput")
    sp.add_argument("--len", type=int, nargs="+", default=[1, 64, 1024])
    sp.add_argument("--width", type=int, default=16)
    sp.add_argument("--state", type=int, default=16)
    sp.add_argument("--mode", nargs="+", choices=("seq", "par", "chunk"), default=["seq", "par", "chunk"])
    sp.add_argument("--chunk", type=int, default=16)
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--figure", type=Path, help="throughput plot (PNG)")
    sp.set_defaults(func=cmd_bench_scan)

    from .verify import CHECKS, FAULTS

    sp = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    sp.add_argument("--only", nargs="+", choices=CHECKS)
    sp.add_argument("--inject-fault", choices=FAULTS)
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    rep = Reporter(args.json)
    try:
        return args.func(args, rep)
    except (UsageError, WavError, ModeMismatchError, FileNotFoundError) as e:
        print(f"mcmamba {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        print(f"mcmamba {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"mcmamba {args.command}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
