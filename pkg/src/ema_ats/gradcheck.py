"""Finite-difference audit of the autograd gradients of every block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import model as M
from .config import ModelConfig
from .data import MelSpectrogram, ProsodyTrack, UtteranceSample
from .training import loss_on_sample

FD_STEP = 1e-5
DENOM_FLOOR = 1e-5


def audit_config(**overrides) -> ModelConfig:
    base = dict(n_speakers=3, c_ema=5, d_hidden=16, d_style=8, n_mels=6, n_conformer_blocks=2,
                n_attn_heads=4, d_ff=24, n_baseline_conv_blocks=1,
                n_baseline_transformer_layers=2, dtype="float64")
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class BlockReport:
    block: str
    n_checked: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), DENOM_FLOOR)


def check_gradients(fn, params: M.ParameterStore, names=None, per_tensor: int = 6,
                    rng: np.random.Generator | None = None, step: float = FD_STEP) -> tuple[int, float]:
    """Compare autograd d fn / d theta with central differences on sampled coordinates.

    ``fn(params)`` must return a scalar tensor. Returns (coordinates checked, max relative error).
    """
    rng = rng or np.random.default_rng(0)
    names = list(names) if names is not None else list(params)
    grad_params = params.with_grad()
    value = fn(grad_params)
    tensors = [grad_params[n] for n in names]
    grads = torch.autograd.grad(value, tensors, allow_unused=True)

    probe = params.clone()
    checked = 0
    worst = 0.0
    with torch.no_grad():
        for name, g in zip(names, grads):
            flat = probe[name].view(-1)
            g = torch.zeros_like(flat) if g is None else g.reshape(-1)
            count = min(per_tensor, flat.numel())
            for idx in rng.choice(flat.numel(), size=count, replace=False):
                old = flat[idx].item()
                flat[idx] = old + step
                up = fn(probe).item()
                flat[idx] = old - step
                down = fn(probe).item()
                flat[idx] = old
                numeric = (up - down) / (2 * step)
                worst = max(worst, relative_error(g[idx].item(), numeric))
                checked += 1
    return checked, worst


def _random_inputs(cfg: ModelConfig, t: int, rng: np.random.Generator):
    ema = torch.as_tensor(rng.standard_normal((t, cfg.c_ema)))
    speaker = int(rng.integers(cfg.n_speakers))
    return ema, speaker


def _projection(shape, rng):
    return torch.as_tensor(rng.standard_normal(shape))


def gradient_audit(cfg: ModelConfig | None = None, seed: int = 0, t: int = 7,
                   per_tensor: int = 6, tolerance: float = 1e-4) -> list[BlockReport]:
    """Audit each block on T <= 8 frames in double precision.

    Each block's output is reduced by a fixed random projection to a scalar.
    """
    cfg = cfg or audit_config(seed=seed)
    if cfg.dtype != "float64":
        raise ValueError("gradient audit needs float64 parameters")
    rng = np.random.default_rng(seed)
    params = M.init_parameters(cfg)
    # move layer-norm gains/biases off their trivial init so they are exercised
    with torch.no_grad():
        for name in params:
            if name.endswith(".bias") or name.endswith(".gain"):
                params[name].add_(torch.as_tensor(0.1 * rng.standard_normal(params[name].shape)))
    base = M.init_baseline_parameters(cfg)
    ema, spk = _random_inputs(cfg, t, rng)
    onehot = M.one_hot_speaker(spk, cfg.n_speakers)
    h0 = torch.as_tensor(rng.standard_normal((t, cfg.d_hidden)))
    s0 = torch.as_tensor(rng.standard_normal((t, cfg.d_style)))

    reports = []

    def run(block, fn, store, names, tol=tolerance):
        n, err = check_gradients(fn, store, names, per_tensor, np.random.default_rng(seed + len(reports)))
        reports.append(BlockReport(block, n, err, tol))

    def prefixed(store, *prefixes):
        return [n for n in store if n.startswith(prefixes)]

    # exactly linear map
    lin = M.ParameterStore({"lin.weight": torch.as_tensor(rng.standard_normal((5, cfg.d_hidden))),
                            "lin.bias": torch.as_tensor(rng.standard_normal(5))})
    r = _projection((t, 5), rng)
    run("linear", lambda p: (M.linear(h0, p, "lin") * r).sum(), lin, None, 1e-8)

    r = _projection((t, cfg.d_hidden), rng)
    run("integration_block", lambda p: (M.integration_block(ema, onehot, p, cfg) * r).sum(),
        params, prefixed(params, "integration."))

    r = _projection((t, cfg.d_style), rng)
    run("style_encoder", lambda p: (M.style_encoder(h0, p, cfg) * r).sum(),
        params, prefixed(params, "style."))

    r = _projection((t,), rng)
    for which in ("pitch", "energy"):
        run(f"variance_predictor[{which}]",
            lambda p, w=which: (M.variance_predictor(s0, p, cfg, w) * r).sum(),
            params, prefixed(params, f"{which}_predictor."))

    r = _projection((t, cfg.d_hidden), rng)
    run("conformer_block", lambda p: (M.conformer_block(h0, p, "generator.blocks.0", cfg) * r).sum(),
        params, prefixed(params, "generator.blocks.0."))

    r = _projection((t, cfg.n_mels), rng)
    run("mel_generator", lambda p: (M.mel_generator(h0, s0, p, cfg) * r).sum(),
        params, prefixed(params, "generator."))

    run("baseline", lambda p: (M.baseline_forward(ema, p, cfg) * r).sum(), base, None)

    sample = _random_sample(cfg, t, spk, ema.numpy(), rng)
    run("total_loss", lambda p: loss_on_sample(p, sample, cfg)[0], params, None)
    return reports


def _random_sample(cfg, t, spk, ema, rng) -> UtteranceSample:
    mel = MelSpectrogram(rng.standard_normal((t, cfg.n_mels)), cfg.hop_samples,
                         cfg.win_samples, cfg.audio_rate_hz)
    prosody = ProsodyTrack(rng.standard_normal(t), rng.standard_normal(t), np.ones(t, dtype=bool))
    return UtteranceSample(ema, mel, prosody, spk, "audit")


def format_report(reports: list[BlockReport]) -> str:
    lines = [f"{'block':<28}{'checked':>8}{'max rel err':>14}  status"]
    for r in reports:
        lines.append(f"{r.block:<28}{r.n_checked:>8}{r.max_rel_error:>14.3e}  "
                     f"{'ok' if r.passed else 'FAIL'} (< {r.tolerance:g})")
    return "\n".join(lines)
