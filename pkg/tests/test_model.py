import numpy as np
import pytest

from mcmamba import tensor as T
from mcmamba.blocks import BiMamba
from mcmamba.dataset import SimSpec, toy_corpus
from mcmamba.dsp import ComplexSpectrogram, istft, stft
from mcmamba.model import (
    FULL_CONFIG,
    TINY_CONFIG,
    McMambaConfig,
    McMambaModel,
    ModeMismatchError,
    assemble_fullband_spatial,
    assemble_narrowband,
    context_magnitudes,
    install_passthrough,
    read_config,
    subband_magnitudes,
    write_config,
)
from mcmamba.tensor import Tensor
from mcmamba.train import si_sdr

SMALL = McMambaConfig(
    n_channels=3, n_bins=11, reference_channel=1, d_out=(6, 6, 6, 2), hidden=(4, 4, 4, 4), d_state=3
)


def random_spec(rng, M, T_, F):
    return ComplexSpectrogram(rng.standard_normal((M, T_, F)), rng.standard_normal((M, T_, F)))


def test_config_invariants():
    with pytest.raises(ValueError):
        McMambaConfig(reference_channel=6)
    with pytest.raises(ValueError):
        McMambaConfig(d_out=(64, 64, 64, 3))
    with pytest.raises(ValueError):
        McMambaConfig(window_rule="both")
    assert FULL_CONFIG.reference_channel == 4 and FULL_CONFIG.n_bins == 257


def test_window_rules():
    eq = McMambaConfig()
    assert len(eq.subband_offsets) == 7 and len(eq.context_offsets) == 6
    text = McMambaConfig(window_rule="text")
    assert len(text.subband_offsets) == 6 and len(text.context_offsets) == 5
    assert text.context_offsets[-1] == 0


def test_fullband_spatial_interleaving():
    one = ComplexSpectrogram(np.ones((1, 1, 1)), np.full((1, 1, 1), 2.0))
    assert assemble_fullband_spatial(one)[0, 0].tolist() == [1.0, 2.0]
    two = ComplexSpectrogram(np.array([1.0, 0.0]).reshape(2, 1, 1), np.array([0.0, -1.0]).reshape(2, 1, 1))
    assert assemble_fullband_spatial(two)[0, 0].tolist() == [1.0, 0.0, 0.0, -1.0]
    zero = ComplexSpectrogram(np.zeros((3, 4, 5)), np.zeros((3, 4, 5)))
    x = assemble_fullband_spatial(zero)
    assert x.shape == (4, 5, 6) and not x.any()


def test_narrowband_assembly(rng):
    spec = random_spec(rng, 1, 4, 5)
    x1 = assemble_fullband_spatial(spec)
    seq = assemble_narrowband(x1, np.zeros((4, 5, 3))).data
    assert seq.shape == (5, 4, 5)
    assert np.array_equal(seq[2, :, 0], spec.re[0, :, 2])
    assert np.array_equal(seq[2, :, 1], spec.im[0, :, 2])
    assert not seq[..., 2:].any()
    perm = rng.permutation(5)
    pspec = ComplexSpectrogram(spec.re[..., perm], spec.im[..., perm])
    pseq = assemble_narrowband(assemble_fullband_spatial(pspec), np.zeros((4, 5, 3))).data
    assert np.array_equal(pseq, seq[perm])


def test_subband_edges(rng):
    mag = np.abs(rng.standard_normal((4, 9))) + 1
    one = subband_magnitudes(mag, [0])
    assert np.array_equal(one[..., 0], mag.T)
    sub = subband_magnitudes(mag, list(range(-3, 4)))
    assert sub.shape == (9, 4, 7)
    assert not sub[0, :, :3].any() and np.all(sub[0, :, 3:] > 0)
    assert np.array_equal(sub[4, :, 0], mag[:, 1])


def test_context_edges(rng):
    mag = np.abs(rng.standard_normal((7, 4))) + 1
    assert np.array_equal(context_magnitudes(mag, [0])[..., 0], mag)
    ctx = context_magnitudes(mag, list(range(-5, 1)))
    assert ctx.shape == (7, 4, 6)
    assert not ctx[0, :, :5].any() and np.array_equal(ctx[0, :, 5], mag[0])
    assert np.array_equal(ctx[6, :, 0], mag[1])
    hist = np.full((2, 4), 9.0)
    assert np.array_equal(context_magnitudes(mag, [-2, -1, 0], hist)[0, :, 0], hist[0])


@pytest.mark.parametrize("causal", [False, True])
def test_stage_shapes_small(rng, causal):
    m = McMambaModel(SMALL.replace(causal=causal), rng)
    out = m.forward_stages(random_spec(rng, 3, 5, 11))
    assert [out[k].shape for k in ("stage1", "stage2", "stage3", "stage4")] == [
        (5, 11, 6), (5, 11, 6), (5, 11, 6), (5, 11, 2)
    ]


def test_stage1_and_stage4_frame_independence(rng):
    m = McMambaModel(SMALL, rng)
    spec = random_spec(rng, 3, 5, 11)
    spec.re[:, 3] = spec.re[:, 1]
    spec.im[:, 3] = spec.im[:, 1]
    s1 = m.stage1(Tensor(assemble_fullband_spatial(spec))).data
    assert np.array_equal(s1[1], s1[3])
    other = ComplexSpectrogram(spec.re.copy(), spec.im.copy())
    other.re[:, 2] += 1.0
    s1b = m.stage1(Tensor(assemble_fullband_spatial(other))).data
    keep = [0, 1, 3, 4]
    assert np.array_equal(s1[keep], s1b[keep])
    z = rng.standard_normal((5, 11, 6 + 6))
    z2 = z.copy()
    z2[2] += 1.0
    assert np.array_equal(m.stage4(Tensor(z)).data[keep], m.stage4(Tensor(z2)).data[keep])


def test_lane_weight_sharing(rng):
    for causal in (False, True):
        m = McMambaModel(SMALL.replace(causal=causal), rng)
        seq = rng.standard_normal((4, 6, m.cfg.stage_inputs[1]))
        seq[2] = seq[0]
        y = m.stage2(Tensor(seq)).data
        assert np.array_equal(y[0], y[2])


def test_noncausal_lane_equals_direct_call(rng):
    m = McMambaModel(SMALL, rng)
    seq = rng.standard_normal((4, 6, m.cfg.stage_inputs[1]))
    y = m.stage2(Tensor(seq)).data
    assert isinstance(m.stage2, BiMamba)
    assert np.array_equal(y[1], m.stage2(Tensor(seq[1])).data)


@pytest.mark.parametrize("trial", range(5))
def test_end_to_end_causality(trial):
    rng = np.random.default_rng(trial)
    m = McMambaModel(SMALL.replace(causal=True), rng)
    spec = random_spec(rng, 3, 8, 11)
    t0 = int(rng.integers(0, 7))
    cut = ComplexSpectrogram(spec.re.copy(), spec.im.copy())
    cut.re[:, t0 + 1 :] = 0.0
    cut.im[:, t0 + 1 :] = 0.0
    a, b = m.enhance_offline(spec), m.enhance_offline(cut)
    assert np.array_equal(a.re[:, : t0 + 1], b.re[:, : t0 + 1])
    assert np.array_equal(a.im[:, : t0 + 1], b.im[:, : t0 + 1])


def test_noncausal_model_sees_the_future(rng):
    m = McMambaModel(SMALL, rng)
    spec = random_spec(rng, 3, 8, 11)
    cut = ComplexSpectrogram(spec.re.copy(), spec.im.copy())
    cut.re[:, 5:] = 0.0
    assert not np.array_equal(m.enhance_offline(spec).re[:, :5], m.enhance_offline(cut).re[:, :5])


def test_enhance_shape_and_determinism(rng):
    m = McMambaModel(SMALL, rng)
    spec = random_spec(rng, 3, 6, 11)
    a, b = m.enhance_offline(spec), m.enhance_offline(spec)
    assert a.shape == (1, 6, 11)
    assert np.array_equal(a.re, b.re) and np.array_equal(a.im, b.im)
    with pytest.raises(ValueError):
        m.enhance_offline(random_spec(rng, 2, 6, 11))


@pytest.mark.parametrize("causal", [False, True])
def test_passthrough_reproduces_reference(causal):
    utt = toy_corpus(1, seed=5, duration_s=0.5, spec=SimSpec(snr_db=(np.inf, np.inf)))[0]
    m = install_passthrough(McMambaModel(TINY_CONFIG.replace(causal=causal)))
    wave = istft(m.enhance_offline(stft(utt.noisy.samples)))
    assert si_sdr(wave, utt.noisy.samples[4][: len(wave)]) > 30


@pytest.mark.parametrize("trial", range(3))
def test_streaming_equals_offline(trial):
    rng = np.random.default_rng(trial)
    m = McMambaModel(SMALL.replace(causal=True), rng)
    spec = random_spec(rng, 3, 9, 11)
    off = m.enhance_offline(spec).complex()[0]
    streamed = np.stack(list(m.enhance_streaming(spec.complex().transpose(1, 0, 2))))
    assert np.array_equal(streamed.real, off.real) and np.array_equal(streamed.imag, off.imag)


def test_stream_state_size_is_bounded(rng):
    m = McMambaModel(SMALL.replace(causal=True), rng)
    ctx = m.new_stream()
    sizes = []
    for _ in range(12):
        m.step(rng.standard_normal((3, 11)), rng.standard_normal((3, 11)), ctx)
        sizes.append(ctx.size)
    assert len(set(sizes[6:])) == 1
    assert ctx.n_frames == 12


def test_streaming_needs_causal(rng):
    with pytest.raises(ModeMismatchError):
        McMambaModel(SMALL, rng).new_stream()


def test_channel_order_matters(rng):
    m = McMambaModel(SMALL, rng)
    differs = 0
    for _ in range(5):
        spec = random_spec(rng, 3, 4, 11)
        swapped = ComplexSpectrogram(spec.re[[2, 1, 0]], spec.im[[2, 1, 0]])
        differs += not np.array_equal(m.enhance_offline(spec).re, m.enhance_offline(swapped).re)
    assert differs == 5


def test_config_file_roundtrip(tmp_path):
    cfg = TINY_CONFIG.replace(causal=True, window_rule="text")
    write_config(tmp_path / "m.cfg", cfg)
    assert read_config(tmp_path / "m.cfg") == cfg
    (tmp_path / "bad.cfg").write_text("n_channels = 6\ncolour = blue\n")
    with pytest.raises(ValueError, match="colour"):
        read_config(tmp_path / "bad.cfg")


def test_weights_roundtrip_and_mode_mismatch(tmp_path, rng):
    m = McMambaModel(SMALL.replace(causal=True), rng)
    m.save(tmp_path / "w.bin")
    back = McMambaModel.load(tmp_path / "w.bin", SMALL.replace(causal=True))
    spec = random_spec(rng, 3, 4, 11)
    assert np.array_equal(back.enhance_offline(spec).re, m.enhance_offline(spec).re)
    with pytest.raises(ModeMismatchError):
        McMambaModel.load(tmp_path / "w.bin", SMALL)


def test_full_size_config_stage_shapes(rng):
    m = McMambaModel(FULL_CONFIG, rng)
    assert m.cfg.stage_inputs == (12, 76, 71, 70)
    spec = random_spec(rng, 6, 2, 257)
    out = m.forward_stages(m.normalize(spec, m.input_scale(spec)))
    assert out["stage1"].shape == (2, 257, 64)
    assert out["stage2"].shape == (2, 257, 64)
    assert out["stage3"].shape == (2, 257, 64)
    assert out["stage4"].shape == (2, 257, 2)
    assert m.stage3.proj_in.shape == (71, 384)
