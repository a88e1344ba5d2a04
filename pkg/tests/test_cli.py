import json

import numpy as np
import pytest

from mcmamba.audio import AudioBuffer, read_wav, write_wav
from mcmamba.cli import main
from mcmamba.model import TINY_CONFIG, McMambaModel, install_passthrough, write_config


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def json_lines(out):
    return [json.loads(line) for line in out.splitlines() if line.strip()]


@pytest.fixture(scope="module")
def assets(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    for causal in (True, False):
        tag = "causal" if causal else "offline"
        model = install_passthrough(McMambaModel(TINY_CONFIG.replace(causal=causal)))
        model.save(d / f"{tag}.bin")
        write_config(d / f"{tag}.cfg", model.cfg)
    assert main(["simulate", "--out", str(d / "mix.wav"), "--target-out", str(d / "clean.wav"),
                 "--duration", "0.25", "--snr", "5"]) == 0
    return d


def test_no_command_is_usage_error(capsys):
    assert run(capsys)[0] == 2
    assert run(capsys, "enhance")[0] == 2
    assert run(capsys, "frobnicate")[0] == 2


def test_help_exits_zero(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0 and "verify" in out


def test_simulate_hits_target_snr(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "--out", str(tmp_path / "m.wav"), "--snr", "2.5",
                       "--duration", "0.2", "--json", "--seed", "3")
    assert code == 0
    row = json_lines(out)[0]
    assert row["target_snr_db"] == 2.5
    assert abs(row["achieved_snr_db"] - 2.5) < 0.01
    assert read_wav(tmp_path / "m.wav").n_channels == 6


def test_enhance_roundtrip(assets, tmp_path, capsys):
    code, out, _ = run(capsys, "enhance", "--in", str(assets / "mix.wav"), "--weights", str(assets / "offline.bin"),
                       "--config", str(assets / "offline.cfg"), "--out", str(tmp_path / "e.wav"), "--json")
    assert code == 0
    assert json_lines(out)[0]["causal"] is False
    assert read_wav(tmp_path / "e.wav").n_channels == 1


def test_enhance_clean_passthrough_scores_high(assets, tmp_path, capsys):
    clean = read_wav(assets / "clean.wav")
    six = AudioBuffer(np.repeat(clean.samples, 6, axis=0), clean.sample_rate)
    write_wav(tmp_path / "six.wav", six)
    code, out, _ = run(capsys, "enhance", "--in", str(tmp_path / "six.wav"), "--weights", str(assets / "causal.bin"),
                       "--config", str(assets / "causal.cfg"), "--out", str(tmp_path / "e.wav"),
                       "--ref", str(assets / "clean.wav"), "--json")
    assert code == 0
    assert json_lines(out)[0]["si_sdr_db"] > 30


def test_enhance_missing_weights_is_usage_error(assets, tmp_path, capsys):
    code, _, err = run(capsys, "enhance", "--in", str(assets / "mix.wav"), "--weights", str(tmp_path / "nope.bin"),
                       "--config", str(assets / "offline.cfg"), "--out", str(tmp_path / "e.wav"))
    assert code == 2 and "error" in err
    code, _, _ = run(capsys, "enhance", "--in", str(assets / "mix.wav"), "--config", str(assets / "offline.cfg"),
                     "--out", str(tmp_path / "e.wav"))
    assert code == 2


def test_wrong_channel_count_is_usage_error(assets, tmp_path, capsys):
    write_wav(tmp_path / "mono.wav", AudioBuffer(np.zeros((1, 4000)), 16000))
    code, _, err = run(capsys, "enhance", "--in", str(tmp_path / "mono.wav"), "--weights", str(assets / "offline.bin"),
                       "--config", str(assets / "offline.cfg"), "--out", str(tmp_path / "e.wav"))
    assert code == 2 and "channels" in err


def test_causal_flag_with_offline_weights(assets, tmp_path, capsys):
    code, _, err = run(capsys, "enhance", "--in", str(assets / "mix.wav"), "--weights", str(assets / "offline.bin"),
                       "--config", str(assets / "offline.cfg"), "--out", str(tmp_path / "e.wav"), "--causal")
    assert code == 2 and "causal" in err
    code, _, _ = run(capsys, "stream", "--in", str(assets / "mix.wav"), "--weights", str(assets / "offline.bin"),
                     "--config", str(assets / "offline.cfg"))
    assert code == 2


def test_weights_config_mismatch(assets, tmp_path, capsys):
    code, _, _ = run(capsys, "enhance", "--in", str(assets / "mix.wav"), "--weights", str(assets / "causal.bin"),
                     "--config", str(assets / "offline.cfg"), "--out", str(tmp_path / "e.wav"))
    assert code == 2


def test_stream_matches_offline(assets, tmp_path, capsys):
    fig = tmp_path / "lat.png"
    code, out, _ = run(capsys, "stream", "--in", str(assets / "mix.wav"), "--weights", str(assets / "causal.bin"),
                       "--config", str(assets / "causal.cfg"), "--out", str(tmp_path / "s.wav"),
                       "--figure", str(fig))
    assert code == 0
    assert "streaming==offline: PASS" in out
    assert fig.stat().st_size > 0
    code, out, _ = run(capsys, "stream", "--in", str(assets / "mix.wav"), "--weights", str(assets / "causal.bin"),
                       "--config", str(assets / "causal.cfg"), "--frame-ms", "5", "--json")
    rows = json_lines(out)
    stats = next(r for r in rows if "p50_ms" in r)
    assert stats["p50_ms"] <= stats["p99_ms"]
    assert stats["frames"] > 0
    assert rows[-1] == {"summary": {"passed": True}}


def test_train_toy_outputs(tmp_path, capsys):
    args = ["train-toy", "--n-utts", "3", "--duration", "0.05", "--epochs", "2", "--causal",
            "--log", str(tmp_path / "log.tsv"), "--checkpoint", str(tmp_path / "w.bin"),
            "--config-out", str(tmp_path / "m.cfg"), "--figure", str(tmp_path / "train.png"), "--json"]
    code, out, _ = run(capsys, *args)
    assert code == 0
    rows = json_lines(out)
    assert [r["epoch"] for r in rows[:2]] == [0, 1]
    assert "best_val_sisdr_db" in rows[-1]
    for name in ("log.tsv", "w.bin", "m.cfg", "train.png"):
        assert (tmp_path / name).stat().st_size > 0
    model = McMambaModel.load(tmp_path / "w.bin", TINY_CONFIG.replace(causal=True))
    assert model.cfg.causal
    _, out2, _ = run(capsys, *args)
    assert out2 == out


def test_train_toy_bad_split(capsys):
    assert run(capsys, "train-toy", "--n-utts", "2", "--val-fraction", "1.0")[0] == 2


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--bins", "5", "--samples", "1", "--frames", "2", "--json")
    rows = json_lines(out)
    assert code == 0
    assert rows[-1]["passed"] is True
    assert rows[-1]["tensors"] == len(rows) - 1


def test_bench_scan(tmp_path, capsys):
    code, out, _ = run(capsys, "bench-scan", "--len", "1", "8", "33", "--width", "3", "--state", "4",
                       "--repeats", "1", "--figure", str(tmp_path / "b.png"), "--json")
    rows = json_lines(out)
    assert code == 0
    assert len(rows) == 3 * 3 + 1
    assert all(r["max_rel_dev"] < 1e-10 for r in rows[:-1])
    assert rows[1]["work"] == 1 * 3 * 4
    assert (tmp_path / "b.png").stat().st_size > 0


def test_table_output_marks_verdicts(capsys):
    code, out, _ = run(capsys, "verify", "--only", "stft")
    assert code == 0
    assert "PASS" in out and "stft" in out


@pytest.mark.parametrize("check", ["scan", "causality", "streaming", "stft"])
def test_verify_single_checks(capsys, check):
    code, out, _ = run(capsys, "verify", "--only", check, "--json")
    rows = json_lines(out)
    assert code == 0
    assert rows[0]["check"] == check and rows[0]["passed"] is True
    assert rows[-1]["summary"] == {"passed": True, "n_checks": 1}


def test_verify_injected_fault_fails(capsys):
    code, out, _ = run(capsys, "verify", "--only", "causality", "--inject-fault", "causality", "--json")
    assert code == 1
    assert json_lines(out)[0]["passed"] is False


def test_verify_unknown_check_is_usage_error(capsys):
    assert run(capsys, "verify", "--only", "nonsense")[0] == 2


def test_json_is_strict_for_infinite_snr(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "--out", str(tmp_path / "m.wav"), "--snr", "inf",
                       "--duration", "0.1", "--json")
    assert code == 0
    row = json.loads(out, parse_constant=lambda c: pytest.fail(f"non-standard JSON constant {c}"))
    assert row["target_snr_db"] == "inf"
