import json

import numpy as np
import pytest

from ema_ats import formats
from ema_ats.cli import CliConfig, main, resolve_config
from ema_ats.data import UtteranceSample, generate_raw_corpus
from ema_ats.config import ModelConfig
from ema_ats.training import read_history

from servers import UNREACHABLE


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synthdata", "--n-speakers", "2", "--n-utterances", "4", "--seed", "42", "--out", str(out)]) == 0
    return out


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return path


def test_synthdata_manifest(synth_dir):
    m = formats.load_manifest(synth_dir / "manifest.json")
    assert m.speaker_labels == ["S00", "S01"] and len(m.entries) == 4


def test_synthdata_round_trip(synth_dir):
    raw = generate_raw_corpus(2, 4, 42, ModelConfig(n_speakers=2))
    m = formats.load_manifest(synth_dir / "manifest.json")
    for r, e in zip(raw, m.entries):
        ema, rate, names = formats.read_ema(m.resolve(e.ema_path))
        wav, sr = formats.read_wav(m.resolve(e.audio_path))
        assert rate == 100.0 and sr == 44100 and names == r.ema.channel_names
        assert np.max(np.abs(ema - r.ema.samples) / np.maximum(np.abs(r.ema.samples), 1e-3)) <= 1e-6
        assert np.max(np.abs(wav - r.audio.samples)) <= 1e-6 * np.max(np.abs(r.audio.samples))


def test_synthdata_deterministic(synth_dir, tmp_path, capsys):
    run(capsys, "synthdata", "--n-speakers", 2, "--n-utterances", 4, "--seed", 42, "--out", tmp_path)
    for f in sorted(synth_dir.rglob("*.*")):
        rel = f.relative_to(synth_dir)
        assert (tmp_path / rel).read_bytes() == f.read_bytes(), rel


def test_preprocess_caches_and_is_idempotent(synth_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "preprocess", "--manifest", synth_dir / "manifest.json", "--out", tmp_path / "c")
    assert code == 0
    rows = [l for l in out.splitlines() if l.startswith("utt0")]
    assert len(rows) == 4
    caches = sorted((tmp_path / "c").glob("*.utt"))
    assert len(caches) == 4
    first = {p.name: p.read_bytes() for p in caches}
    s = UtteranceSample.load(caches[0])
    assert s.ema.shape[0] == s.mel.n_frames == int(rows[0].split(",")[1])
    run(capsys, "preprocess", "--manifest", synth_dir / "manifest.json", "--out", tmp_path / "c")
    assert {p.name: p.read_bytes() for p in (tmp_path / "c").glob("*.utt")} == first


def test_preprocess_skips_corrupt_utterance(synth_dir, tmp_path, capsys):
    import shutil
    bad = tmp_path / "data"
    shutil.copytree(synth_dir, bad)
    ema = bad / "ema" / "utt0002.f32"
    ema.write_bytes(ema.read_bytes()[:-4])
    code, out, _ = run(capsys, "preprocess", "--manifest", bad / "manifest.json", "--out", tmp_path / "c")
    assert code != 0
    assert sorted(p.stem for p in (tmp_path / "c").glob("*.utt")) == ["utt0000", "utt0001", "utt0003"]


def test_config_echo_parses_back(tmp_path, capsys):
    cfg_path = write_config(tmp_path / "c.json", model={"d_hidden": 64}, endpoints={"vocoder_url": "${VOC_URL}"})
    code, out, _ = run(capsys, "evaluate", "--config", cfg_path, "--set", "model.n_conformer_blocks=2",
                       "--set", "paths.checkpoint=nowhere.ats", "--seed", "9")
    echoed = json.loads(out.splitlines()[0])
    back = CliConfig.from_dict(echoed)
    assert back.model.d_hidden == 64 and back.model.n_conformer_blocks == 2
    assert back.model.seed == 9 and back.train.seed == 9
    assert back == resolve_config(cfg_path, ["model.n_conformer_blocks=2", "paths.checkpoint=nowhere.ats"], 9)


def test_env_substitution(tmp_path, monkeypatch):
    monkeypatch.setenv("VOC_URL", "http://vocoder.local:8000/")
    cfg_path = write_config(tmp_path / "c.json", endpoints={"vocoder_url": "${VOC_URL}"})
    assert resolve_config(cfg_path).endpoints.vocoder_url == "http://vocoder.local:8000/"


def test_evaluate_without_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "evaluate", "--set", f"paths.checkpoint={tmp_path / 'missing.ats'}")
    assert code == 2
    assert "missing.ats" in err


def test_bad_config_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--set", "model.d_hidden=30")
    assert code == 2
    code, _, _ = run(capsys, "train", "--set", "nonsense=1")
    assert code == 2


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    work = tmp_path_factory.mktemp("work")
    cfg = write_config(work / "cfg.json",
                       model={"d_hidden": 16, "d_style": 8, "n_conformer_blocks": 1, "d_ff": 32},
                       train={"max_steps": 4, "checkpoint_every": 2, "learning_rate": 1e-3},
                       paths={"manifest": str(synth_dir / "manifest.json"), "workdir": str(work)},
                       endpoints={"vocoder_url": UNREACHABLE})
    assert main(["train", "--config", str(cfg)]) == 0
    return cfg, work


def test_train_outputs(trained):
    _, work = trained
    assert sorted(p.name for p in work.glob("*.ats")) == ["ckpt_000002.ats", "ckpt_000004.ats", "final.ats"]
    assert len(read_history(work / "loss_history.csv")) == 4


def test_synthesize_falls_back_to_griffin_lim(trained, synth_dir, tmp_path, capsys):
    cfg, work = trained
    code, out, err = run(capsys, "synthesize", "--config", cfg, "--checkpoint", work / "final.ats",
                         "--ema", synth_dir / "ema" / "utt0001.f32", "--speaker", "S01",
                         "--out", tmp_path / "o.wav", "--set", "gl_iters=5")
    assert code == 0
    assert "warning" in err and "Griffin-Lim" in err
    x, sr = formats.read_wav(tmp_path / "o.wav")
    assert sr == 44100 and len(x) > 0
    assert np.all(np.isfinite(x)) and np.max(np.abs(x)) <= 1.0


def test_synthesize_without_fallback_is_endpoint_error(trained, synth_dir, tmp_path, capsys):
    cfg, work = trained
    code, _, _ = run(capsys, "synthesize", "--config", cfg, "--checkpoint", work / "final.ats",
                     "--ema", synth_dir / "ema" / "utt0001.f32", "--speaker", "1",
                     "--out", tmp_path / "o.wav", "--set", "flags.fallback_vocoder=false")
    assert code == 5


def test_evaluate_writes_report(trained, capsys):
    cfg, work = trained
    code, out, _ = run(capsys, "evaluate", "--config", cfg, "--checkpoint", work / "final.ats")
    assert code == 0
    lines = (work / "eval" / "report.csv").read_text().splitlines()
    assert len(lines) == 1 + 4 + 1
    assert (work / "eval" / "utt0000_pitch.txt").exists()


@pytest.mark.slow
def test_cli_overfit_run(synth_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json",
                       model={"d_hidden": 64, "n_conformer_blocks": 2},
                       train={"max_steps": 500, "checkpoint_every": 250, "learning_rate": 1e-4},
                       paths={"manifest": str(synth_dir / "manifest.json"), "workdir": str(tmp_path)})
    code, _, _ = run(capsys, "train", "--config", cfg)
    assert code == 0
    h = read_history(tmp_path / "loss_history.csv")
    assert len(h) == 500
    # first vs last epoch: each utterance seen once in both
    first = np.mean([r.l_mel for r in h[:4]])
    last = np.mean([r.l_mel for r in h[-4:]])
    assert last <= 0.2 * first
