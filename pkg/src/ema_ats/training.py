"""Weighted L1 objective, Adam training step, and the checkpointed training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import formats
from .config import ModelConfig, TrainConfig
from .data import UtteranceSample
from .model import DTYPES, ParameterStore, forward_train, init_parameters

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("step", "l_mel", "l_pitch", "l_energy", "l_total")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossBreakdown:
    l_mel: float
    l_pitch: float
    l_energy: float
    l_total: float

    @classmethod
    def combine(cls, l_mel, l_pitch, l_energy, cfg: ModelConfig) -> "LossBreakdown":
        total = cfg.lambda_mel * l_mel + cfg.lambda_pitch * l_pitch + cfg.lambda_energy * l_energy
        return cls(float(l_mel), float(l_pitch), float(l_energy), float(total))


def l1_loss(pred, target):
    """Mean absolute difference; works on numpy arrays and torch tensors."""
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if isinstance(pred, torch.Tensor) or isinstance(target, torch.Tensor):
        return torch.mean(torch.abs(torch.as_tensor(pred) - torch.as_tensor(target)))
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))))


def _weighted(mel_pred, mel_tgt, pitch_pred, pitch_tgt, energy_pred, energy_tgt, cfg):
    parts = []
    for label, pred, tgt in (("mel", mel_pred, mel_tgt), ("pitch", pitch_pred, pitch_tgt),
                             ("energy", energy_pred, energy_tgt)):
        if tuple(pred.shape) != tuple(tgt.shape):
            raise ValueError(f"{label} shape mismatch: {tuple(pred.shape)} vs {tuple(tgt.shape)}")
        parts.append(l1_loss(pred, tgt))
    l_mel, l_pitch, l_energy = parts
    total = cfg.lambda_mel * l_mel + cfg.lambda_pitch * l_pitch + cfg.lambda_energy * l_energy
    return total, parts


def total_loss(mel_pred, mel_tgt, pitch_pred, pitch_tgt, energy_pred, energy_tgt,
               cfg: ModelConfig) -> LossBreakdown:
    _, parts = _weighted(mel_pred, mel_tgt, pitch_pred, pitch_tgt, energy_pred, energy_tgt, cfg)
    return LossBreakdown.combine(*(float(x) for x in parts), cfg)


def sample_targets(sample: UtteranceSample, dtype) -> tuple[torch.Tensor, ...]:
    return (
        torch.as_tensor(sample.ema, dtype=dtype),
        torch.as_tensor(sample.mel.frames, dtype=dtype),
        torch.as_tensor(sample.prosody.pitch_db, dtype=dtype),
        torch.as_tensor(sample.prosody.energy_db, dtype=dtype),
    )


def loss_on_sample(params, sample: UtteranceSample, cfg: ModelConfig, training: bool = False):
    """Differentiable total loss plus its float breakdown."""
    dtype = DTYPES[cfg.dtype]
    ema, mel_t, pitch_t, energy_t = sample_targets(sample, dtype)
    mel, pitch, energy = forward_train(ema, sample.speaker_index, params, cfg, training)
    total, parts = _weighted(mel, mel_t, pitch, pitch_t, energy, energy_t, cfg)
    return total, LossBreakdown.combine(*(p.item() for p in parts), cfg)


class Optimizer:
    """Adam over a ParameterStore, with state exportable by parameter name."""

    def __init__(self, params: ParameterStore, tcfg: TrainConfig):
        self.params = params
        self.names = list(params)
        self.adam = torch.optim.Adam(params.tensors(), lr=tcfg.learning_rate,
                                     betas=(0.9, 0.999), eps=1e-8, foreach=False)
        self.step_count = 0

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        state = self.adam.state
        for name, tensor in zip(self.names, self.params.tensors()):
            if tensor in state:
                st = state[tensor]
                out[f"adam.exp_avg.{name}"] = st["exp_avg"].detach().numpy().astype(np.float64)
                out[f"adam.exp_avg_sq.{name}"] = st["exp_avg_sq"].detach().numpy().astype(np.float64)
                out[f"adam.step.{name}"] = np.array([float(st["step"])])
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name, tensor in zip(self.names, self.params.tensors()):
            key = f"adam.exp_avg.{name}"
            if key not in arrays:
                continue
            self.adam.state[tensor] = {
                "step": torch.tensor(float(arrays[f"adam.step.{name}"][0])),
                "exp_avg": torch.as_tensor(arrays[key], dtype=tensor.dtype).clone(),
                "exp_avg_sq": torch.as_tensor(arrays[f"adam.exp_avg_sq.{name}"], dtype=tensor.dtype).clone(),
            }
        self.step_count = step_count


def make_optimizer(params: ParameterStore, tcfg: TrainConfig) -> Optimizer:
    for t in params.tensors():
        t.requires_grad_(True)
    return Optimizer(params, tcfg)


def train_step(params: ParameterStore, sample: UtteranceSample, cfg: ModelConfig,
               tcfg: TrainConfig, opt: Optimizer | None = None) -> tuple[ParameterStore, LossBreakdown]:
    """One clipped Adam update in place; returns the store and the pre-update loss.

    Without ``opt`` a fresh optimizer state is used (first-step semantics).
    """
    opt = opt or make_optimizer(params, tcfg)
    opt.adam.zero_grad(set_to_none=True)
    total, breakdown = loss_on_sample(params, sample, cfg, training=True)
    if not math.isfinite(breakdown.l_total):
        raise DivergenceError(f"divergence at step {opt.step_count}: loss {breakdown.l_total}")
    total.backward()
    torch.nn.utils.clip_grad_norm_(params.tensors(), tcfg.grad_clip_norm)
    opt.adam.step()
    opt.step_count += 1
    return params, breakdown


def grad_norm(params: ParameterStore) -> float:
    return math.sqrt(sum(float((t.grad.double() ** 2).sum()) for t in params.tensors()
                         if t.grad is not None))


def data_order(step: int, n: int, seed: int) -> int:
    """Index of the sample used at ``step``: a fresh seeded shuffle per epoch."""
    epoch, pos = divmod(step, n)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return int(perm[pos])


def config_echo(cfg: ModelConfig, tcfg: TrainConfig | None = None) -> dict:
    out = {"model": dataclasses.asdict(cfg)}
    if tcfg is not None:
        out["train"] = dataclasses.asdict(tcfg)
    return out


def save_checkpoint(path, params: ParameterStore, cfg: ModelConfig, tcfg: TrainConfig | None = None,
                    opt: Optimizer | None = None, extra: dict | None = None) -> None:
    header = {"kind": "ats-checkpoint", **config_echo(cfg, tcfg)}
    header["step"] = opt.step_count if opt else 0
    if extra:
        header.update(extra)
    arrays = {f"param.{k}": v for k, v in params.to_numpy().items()}
    if opt is not None:
        arrays.update(opt.state_arrays())
    formats.save_arrays(path, header, arrays)


@dataclass
class Checkpoint:
    params: ParameterStore
    cfg: ModelConfig
    tcfg: TrainConfig | None
    step: int
    header: dict
    optimizer_arrays: dict


def load_checkpoint(path) -> Checkpoint:
    header, arrays = formats.load_arrays(path)
    if header.get("kind") != "ats-checkpoint":
        raise formats.FormatError(f"{path} is not a checkpoint")
    cfg = ModelConfig(**header["model"])
    tcfg = TrainConfig(**header["train"]) if "train" in header else None
    params = ParameterStore.from_numpy(
        {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")},
        dtype=DTYPES[cfg.dtype],
    )
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    return Checkpoint(params, cfg, tcfg, int(header.get("step", 0)), header, opt_arrays)


@dataclass
class TrainResult:
    params: ParameterStore
    history: list[LossBreakdown]
    checkpoints: list[Path]


def train_loop(corpus: list[UtteranceSample], cfg: ModelConfig, tcfg: TrainConfig,
               out_dir=None, resume_from=None, extra_header: dict | None = None,
               progress: bool = False) -> TrainResult:
    """Run ``tcfg.max_steps`` steps (counting from a resumed checkpoint's step).

    Checkpoints ``ckpt_<step>.ats`` every ``checkpoint_every`` steps plus
    ``final.ats``; ``history`` holds the losses of the steps run in this call.
    """
    if not corpus:
        raise ValueError("empty corpus")
    start = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        params = ck.params
        opt = make_optimizer(params, tcfg)
        opt.load_state_arrays(ck.optimizer_arrays, ck.step)
        start = ck.step
    else:
        params = init_parameters(cfg)
        opt = make_optimizer(params, tcfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history: list[LossBreakdown] = []
    written: list[Path] = []
    for step in range(start, tcfg.max_steps):
        sample = corpus[data_order(step, len(corpus), tcfg.seed)]
        _, loss = train_step(params, sample, cfg, tcfg, opt)
        history.append(loss)
        if progress and (step + 1) % 50 == 0:
            log.info("step %d  l_mel %.4f  l_total %.4f", step + 1, loss.l_mel, loss.l_total)
        if out is not None and (step + 1) % tcfg.checkpoint_every == 0:
            path = out / f"ckpt_{step + 1:06d}.ats"
            save_checkpoint(path, params, cfg, tcfg, opt, extra_header)
            written.append(path)
    if out is not None:
        path = out / "final.ats"
        save_checkpoint(path, params, cfg, tcfg, opt, extra_header)
        written.append(path)
    for t in params.tensors():
        t.requires_grad_(False)
        t.grad = None
    return TrainResult(params, history, written)


def write_history(path, history: list[LossBreakdown], first_step: int = 1) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for i, row in enumerate(history):
            w.writerow([first_step + i, repr(row.l_mel), repr(row.l_pitch),
                        repr(row.l_energy), repr(row.l_total)])


def read_history(path) -> list[LossBreakdown]:
    with open(path, newline="") as fh:
        return [LossBreakdown(float(r["l_mel"]), float(r["l_pitch"]), float(r["l_energy"]),
                              float(r["l_total"])) for r in csv.DictReader(fh)]
