import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ema_ats import formats
from ema_ats.data import AudioWaveform, MelSpectrogram, ProsodyTrack
from ema_ats.evaluation import (ASRError, EvalReport, EvalRow, cer, cer_harness, evaluate_corpus,
                                levenshtein, mcd, mel_to_cepstra, normalize_text, trajectory_compare)

from servers import UNREACHABLE, serve


def dct2_oracle(x, n_ceps):
    n = len(x)
    out = []
    for k in range(1, n_ceps + 1):
        s = sum(x[i] * math.cos(math.pi * k * (2 * i + 1) / (2 * n)) for i in range(n))
        out.append(math.sqrt(2.0 / n) * s)
    return np.array(out)


def test_cepstra_of_constant_frame():
    c = mel_to_cepstra(np.full((3, 40), -2.7), 13)
    assert c.shape == (3, 13)
    np.testing.assert_allclose(c, 0.0, atol=1e-12)


def test_cepstra_match_brute_force_dct():
    x = np.random.default_rng(0).standard_normal((4, 40)) * 3
    c = mel_to_cepstra(MelSpectrogram(x, 768, 1024, 44100), 13)
    for t in range(4):
        assert np.max(np.abs(c[t] - dct2_oracle(x[t], 13))) <= 1e-10


def test_cepstra_range_check():
    with pytest.raises(ValueError):
        mel_to_cepstra(np.zeros((2, 40)), 40)
    with pytest.raises(ValueError):
        mel_to_cepstra(np.zeros((2, 40)), 0)


frames = hnp.arrays(np.float64, (3, 40), elements=st.floats(-20, 20))


@settings(max_examples=40, deadline=None)
@given(frames, frames, st.floats(-5, 5), st.floats(-5, 5))
def test_cepstra_linear(x, y, a, b):
    lhs = mel_to_cepstra(a * x + b * y)
    rhs = a * mel_to_cepstra(x) + b * mel_to_cepstra(y)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9


def test_mcd_examples():
    c = np.random.default_rng(0).standard_normal((5, 13))
    assert mcd(c, c) == 0
    a, b = np.zeros((1, 13)), np.zeros((1, 13))
    b[0, 4] = 1.0
    assert abs(mcd(a, b) - 10 / np.log(10) * np.sqrt(2)) <= 1e-9
    assert abs(mcd(a, b) - 6.1418) < 1e-4


def test_mcd_matches_per_frame_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((50, 13)), rng.standard_normal((50, 13))
    total = 0.0
    for t in range(50):
        total += (10 / math.log(10)) * math.sqrt(2 * sum((a[t, d] - b[t, d]) ** 2 for d in range(13)))
    assert abs(mcd(a, b) - total / 50) <= 1e-10
    with pytest.raises(ValueError):
        mcd(a, b[:49])


ceps = hnp.arrays(np.float64, (6, 13), elements=st.integers(-50000, 50000).map(lambda v: v / 1000))


@settings(max_examples=50, deadline=None)
@given(ceps, ceps)
def test_mcd_metric_properties(a, b):
    d = mcd(a, b)
    assert d >= 0
    assert d == mcd(b, a)
    assert (d == 0) == np.array_equal(a, b)


def _track(n, voiced=None, seed=0):
    rng = np.random.default_rng(seed)
    v = np.ones(n, bool) if voiced is None else voiced
    return ProsodyTrack(np.where(v, 40 + rng.standard_normal(n), 0.0), 30 + rng.standard_normal(n), v)


def test_trajectory_identity_and_offset():
    tgt = _track(20)
    r = trajectory_compare(tgt, tgt)
    assert r.pitch_rmse_db == 0 and r.energy_rmse_db == 0
    r = trajectory_compare((tgt.pitch_db + 2, tgt.energy_db + 2), tgt)
    assert abs(r.pitch_rmse_db - 2.0) < 1e-12 and abs(r.energy_rmse_db - 2.0) < 1e-12
    assert r.table.shape == (20, 5)


def test_trajectory_voiced_mask():
    voiced = np.arange(30) % 2 == 0
    tgt = _track(30, voiced)
    rng = np.random.default_rng(5)
    pred_pitch = rng.standard_normal(30) * 10 + 40
    r = trajectory_compare((pred_pitch, tgt.energy_db), tgt)
    sq = [(pred_pitch[i] - tgt.pitch_db[i]) ** 2 for i in range(30) if voiced[i]]
    assert abs(r.pitch_rmse_db - math.sqrt(sum(sq) / len(sq))) < 1e-12
    # unvoiced frames are ignored exactly
    pred2 = pred_pitch.copy()
    pred2[~voiced] += 1000
    assert trajectory_compare((pred2, tgt.energy_db), tgt).pitch_rmse_db == r.pitch_rmse_db


def test_trajectory_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        trajectory_compare((np.zeros(3), np.zeros(3)), _track(4))


def test_trajectory_files(tmp_path):
    tgt = _track(5)
    p, e = trajectory_compare(tgt, tgt).write(tmp_path / "u1")
    data = np.loadtxt(p)
    assert data.shape == (5, 3)
    np.testing.assert_allclose(data[:, 1], tgt.pitch_db, atol=1e-6)
    assert e.name == "u1_energy.txt"


def test_levenshtein_and_cer():
    assert levenshtein("kitten", "sitting") == 3
    assert cer("abc", "abc") == 0
    assert abs(cer("axc", "abc") - 100 / 3) < 1e-12
    assert cer("sitting", "kitten") == 50.0


def _dp_oracle(a, b):
    # full-table reference implementation
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1][-1]


@given(st.text("abcd ", max_size=12), st.text("abcd ", max_size=12))
def test_levenshtein_matches_table(a, b):
    assert levenshtein(a, b) == _dp_oracle(a, b) == levenshtein(b, a)


def test_cer_normalization_flag():
    assert cer("Hello,  World!", "hello world", normalize=True) == 0
    assert cer("Hello,  World!", "hello world", normalize=False) > 0
    assert normalize_text("  A.b  C ") == "ab c"


def test_cer_harness_with_mock_asr():
    wav = AudioWaveform(np.zeros(100), 16000)
    replies = iter([b"the wrist", b"was badly strained"])
    with serve(lambda body: (200, next(replies))) as (url, received):
        score = cer_harness([(wav, "the wrist"), (wav, "was badly strainex")], url)
    assert abs(score - (0 + 100 / 18) / 2) < 1e-12
    assert formats.parse_wav(received[0])[1] == 16000


def test_cer_harness_failures():
    wav = AudioWaveform(np.zeros(100), 16000)
    with pytest.raises(ASRError, match="all ASR requests failed"):
        with pytest.warns(UserWarning):
            cer_harness([(wav, "abc")], UNREACHABLE, timeout=1.0)
    calls = iter([(500, b""), (200, b"abc")])
    with serve(lambda body: next(calls)) as (url, _):
        with pytest.warns(UserWarning, match="pair 0 excluded"):
            assert cer_harness([(wav, "xyz"), (wav, "abc")], url) == 0


def test_evaluate_corpus_oracle_model(corpus, corpus_cfg):
    sample = corpus[0]
    report = evaluate_corpus(None, [sample], corpus_cfg,
                             synthesizer=lambda s: s.mel.frames,
                             prosody_predictor=lambda s: (s.prosody.pitch_db, s.prosody.energy_db))
    assert report.rows[0].mcd_db == 0
    assert report.rows[0].pitch_rmse_db == 0


def test_report_means_and_csv(tmp_path):
    rows = [EvalRow("a", 1.0, 2.0, 3.0), EvalRow("b", 3.0, 4.0, 5.0, cer_percent=10.0)]
    rep = EvalReport(rows)
    assert rep.means["mcd_db"] == 2.0 and rep.means["energy_rmse_db"] == 4.0
    assert rep.means["cer_percent"] == 10.0 and rep.means["stoi"] is None
    (tmp_path / "ext.csv").write_text("utterance_id,stoi,pesq\na,0.7,1.2\n")
    rep.merge_external(tmp_path / "ext.csv")
    assert rows[0].stoi == 0.7 and rows[0].pesq == 1.2
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("utterance_id,mcd_db") and lines[-1].startswith("MEAN,2.000000")


def test_trained_model_beats_untrained_mcd(overfit, corpus, corpus_cfg):
    result, init, _ = overfit
    trained = evaluate_corpus(result.params, corpus, corpus_cfg).mean("mcd_db")
    untrained = evaluate_corpus(init, corpus, corpus_cfg).mean("mcd_db")
    assert trained < untrained
