"""Command-line workflows: synthdata, preprocess, train, synthesize, evaluate.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 divergence, 5 endpoint error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from . import formats
from .config import ConfigError, ModelConfig, TrainConfig
from .data import (DataError, EmaRecording, UtteranceSample, build_sample, generate_raw_corpus,
                   read_utterance)
from .evaluation import ASRError, evaluate_corpus
from .inference import VocoderError, VocoderRequest, synthesize_mel, vocoder_client
from .training import DivergenceError, load_checkpoint, train_loop, write_history

log = logging.getLogger("ema_ats")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_ENDPOINT = 0, 2, 3, 4, 5


@dataclass
class Paths:
    manifest: str | None = None
    workdir: str = "runs/default"
    checkpoint: str | None = None


@dataclass
class Endpoints:
    vocoder_url: str | None = None
    asr_url: str | None = None


@dataclass
class Flags:
    fallback_vocoder: bool = True
    normalize_text: bool = True


@dataclass
class CliConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)
    endpoints: Endpoints = field(default_factory=Endpoints)
    flags: Flags = field(default_factory=Flags)
    gl_iters: int = 60
    n_ceps: int = 13

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "CliConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        sections = {"model": ModelConfig, "train": TrainConfig, "paths": Paths,
                    "endpoints": Endpoints, "flags": Flags}
        kwargs = {}
        for key, value in doc.items():
            if key in sections:
                try:
                    kwargs[key] = sections[key](**value)
                except TypeError as exc:
                    raise ConfigError(f"bad [{key}] section: {exc}") from None
            else:
                kwargs[key] = value
        return cls(**kwargs)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(doc: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    *parents, leaf = key.split(".")
    node = doc
    for part in parents:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {part} is not a section")
    node[leaf] = _parse_value(raw)


def _expand_env(doc: dict) -> None:
    ep = doc.get("endpoints") or {}
    for k, v in ep.items():
        if isinstance(v, str):
            ep[k] = os.path.expandvars(v)


def resolve_config(config_path=None, overrides=(), seed=None) -> CliConfig:
    doc: dict = CliConfig().to_dict()
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for section, value in loaded.items():
            if isinstance(value, dict) and isinstance(doc.get(section), dict):
                doc[section].update(value)
            else:
                doc[section] = value
    for ov in overrides:
        apply_override(doc, ov)
    if seed is not None:
        doc["model"]["seed"] = seed
        doc["train"]["seed"] = seed
    _expand_env(doc)
    return CliConfig.from_dict(doc)


def echo(cfg: CliConfig) -> None:
    print(json.dumps(cfg.to_dict(), sort_keys=True))


# --- commands


def _load_manifest(cfg: CliConfig, override=None) -> formats.DatasetManifest:
    path = override or cfg.paths.manifest
    if not path:
        raise ConfigError("no manifest configured (paths.manifest)")
    if not Path(path).exists():
        raise ConfigError(f"manifest not found: {path}")
    return formats.load_manifest(path)


def _model_for(cfg: CliConfig, manifest: formats.DatasetManifest) -> ModelConfig:
    if cfg.model.n_speakers != manifest.n_speakers:
        log.info("n_speakers set to %d from manifest", manifest.n_speakers)
        return cfg.model.replace(n_speakers=manifest.n_speakers)
    return cfg.model


def _build_corpus(manifest, mcfg: ModelConfig) -> list[UtteranceSample]:
    out = []
    for entry in manifest.entries:
        ema, wav = read_utterance(manifest, entry)
        out.append(build_sample(ema, wav, manifest.speaker_index(entry.speaker_label), mcfg,
                                entry.utterance_id))
    return out


def cmd_synthdata(cfg: CliConfig, args) -> int:
    out = Path(args.out)
    try:
        (out / "ema").mkdir(parents=True, exist_ok=True)
        (out / "wav").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot write to {out}: {exc}") from None
    mcfg = cfg.model.replace(n_speakers=args.n_speakers)
    raw = generate_raw_corpus(args.n_speakers, args.n_utterances, cfg.model.seed, mcfg)
    labels = [f"S{i:02d}" for i in range(args.n_speakers)]
    entries = []
    for r in raw:
        ema_rel = f"ema/{r.utterance_id}.f32"
        wav_rel = f"wav/{r.utterance_id}.wav"
        formats.write_ema(out / ema_rel, r.ema.samples, r.ema.sample_rate_hz, r.ema.channel_names)
        formats.write_wav(out / wav_rel, r.audio.samples, r.audio.sample_rate_hz)
        entries.append(formats.ManifestEntry(r.utterance_id, ema_rel, wav_rel, labels[r.speaker_index]))
    manifest = formats.DatasetManifest(entries, labels)
    (out / "manifest.json").write_text(manifest.to_json())
    print(f"wrote {len(entries)} utterances for {len(labels)} speakers to {out / 'manifest.json'}")
    return EXIT_OK


def cmd_preprocess(cfg: CliConfig, args) -> int:
    manifest = _load_manifest(cfg, args.manifest)
    mcfg = _model_for(cfg, manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    print("utterance_id,frames,duration_s")
    for entry in manifest.entries:
        try:
            ema, wav = read_utterance(manifest, entry)
            sample = build_sample(ema, wav, manifest.speaker_index(entry.speaker_label), mcfg,
                                  entry.utterance_id)
        except (DataError, formats.FormatError, FileNotFoundError) as exc:
            log.error("skipping %s: %s", entry.utterance_id, exc)
            failures += 1
            continue
        sample.save(out / f"{entry.utterance_id}.utt")
        duration = (sample.n_frames - 1) * mcfg.hop_samples + mcfg.win_samples
        print(f"{entry.utterance_id},{sample.n_frames},{duration / mcfg.audio_rate_hz:.4f}")
    return EXIT_DATA if failures else EXIT_OK


def cmd_train(cfg: CliConfig, args) -> int:
    manifest = _load_manifest(cfg)
    mcfg = _model_for(cfg, manifest)
    corpus = _build_corpus(manifest, mcfg)
    workdir = Path(cfg.paths.workdir)
    result = train_loop(corpus, mcfg, cfg.train, out_dir=workdir, resume_from=args.resume,
                        extra_header={"speaker_labels": manifest.speaker_labels}, progress=True)
    first = cfg.train.max_steps - len(result.history) + 1
    write_history(workdir / "loss_history.csv", result.history, first_step=first)
    if result.history:
        h0, h1 = result.history[0], result.history[-1]
        print(f"l_mel {h0.l_mel:.4f} -> {h1.l_mel:.4f} over {len(result.history)} steps")
    print(f"final checkpoint: {result.checkpoints[-1]}")
    return EXIT_OK


def _checkpoint_path(cfg: CliConfig, override) -> Path:
    path = override or cfg.paths.checkpoint
    if not path:
        raise ConfigError("no checkpoint configured (paths.checkpoint)")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return Path(path)


def cmd_synthesize(cfg: CliConfig, args) -> int:
    ck = load_checkpoint(_checkpoint_path(cfg, args.checkpoint))
    labels = ck.header.get("speaker_labels") or [str(i) for i in range(ck.cfg.n_speakers)]
    if args.speaker in labels:
        speaker = labels.index(args.speaker)
    else:
        try:
            speaker = int(args.speaker)
        except ValueError:
            raise ConfigError(f"unknown speaker {args.speaker!r}; known: {labels}") from None
        if not 0 <= speaker < ck.cfg.n_speakers:
            raise ConfigError(f"speaker index {speaker} out of range")
    samples, rate, names = formats.read_ema(args.ema)
    mel = synthesize_mel(EmaRecording(samples, rate, names), speaker, ck.params, ck.cfg)
    request = VocoderRequest(mel, labels[speaker], Path(args.ema).stem)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        wav = vocoder_client(request, cfg.endpoints.vocoder_url, fallback=cfg.flags.fallback_vocoder,
                             gl_iters=cfg.gl_iters, cfg=ck.cfg)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    formats.write_wav(args.out, wav.samples, wav.sample_rate_hz)
    print(f"wrote {args.out} ({len(wav.samples)} samples, {mel.n_frames} mel frames)")
    return EXIT_OK


def cmd_evaluate(cfg: CliConfig, args) -> int:
    ck = load_checkpoint(_checkpoint_path(cfg, args.checkpoint))
    manifest = _load_manifest(cfg)
    corpus = _build_corpus(manifest, ck.cfg)
    report = evaluate_corpus(ck.params, corpus, ck.cfg, n_ceps=cfg.n_ceps)
    out = Path(cfg.paths.workdir) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    if args.external:
        report.merge_external(args.external)
    report.write_csv(out / "report.csv")
    for utt, traj in report.trajectories.items():
        traj.write(out / utt)
    means = report.means
    print(f"MCD {means['mcd_db']:.3f} dB  pitch RMSE {means['pitch_rmse_db']:.3f} dB  "
          f"energy RMSE {means['energy_rmse_db']:.3f} dB  ({len(report.rows)} utterances)")
    print(f"report: {out / 'report.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, repeatable (e.g. model.d_hidden=64)")
    common.add_argument("--seed", type=int, help="sets model.seed and train.seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ema-ats", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthdata", parents=[common], help="write a synthetic EMA/audio corpus")
    s.add_argument("--n-speakers", type=int, default=2)
    s.add_argument("--n-utterances", type=int, default=4)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthdata)

    s = sub.add_parser("preprocess", parents=[common], help="cache aligned training samples")
    s.add_argument("--manifest")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", parents=[common], help="train on the manifest corpus")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", parents=[common], help="EMA file -> WAV")
    s.add_argument("--checkpoint")
    s.add_argument("--ema", required=True, help="EMA .f32 file (with .json sidecar)")
    s.add_argument("--speaker", required=True, help="speaker label or index")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("evaluate", parents=[common], help="MCD and prosody report")
    s.add_argument("--checkpoint")
    s.add_argument("--external", help="CSV with externally computed stoi/pesq/cer_percent")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.set, args.seed)
        echo(cfg)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (VocoderError, ASRError) as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except (DataError, formats.FormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
