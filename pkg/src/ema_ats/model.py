"""Network blocks as pure functions over a named parameter store.

Every forward takes unbatched ``[T, features]`` tensors. Parameters live in a
:class:`ParameterStore` keyed by dotted names (``"generator.blocks.3.attn.q.weight"``);
torch autograd supplies gradients.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from collections.abc import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig

DTYPES = {"float32": torch.float32, "float64": torch.float64}

PREDICTORS = ("pitch_predictor", "energy_predictor")


class ParameterStore(Mapping):
    """Ordered name -> tensor mapping with fixed shapes.

    ``trace`` (a set) collects every name read through ``[]`` while attached;
    used to prove which sub-networks a code path touches.
    """

    def __init__(self, tensors=None):
        self._tensors: OrderedDict[str, torch.Tensor] = OrderedDict(tensors or {})
        self.trace: set[str] | None = None

    def __getitem__(self, name: str) -> torch.Tensor:
        if self.trace is not None:
            self.trace.add(name)
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def add(self, name: str, tensor: torch.Tensor) -> None:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        self._tensors[name] = tensor

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._tensors.items()}

    def num_parameters(self) -> int:
        return sum(v.numel() for v in self._tensors.values())

    def tensors(self) -> list[torch.Tensor]:
        return list(self._tensors.values())

    def with_grad(self) -> "ParameterStore":
        """Detached copies that require grad."""
        return ParameterStore((k, v.detach().clone().requires_grad_(True))
                              for k, v in self._tensors.items())

    def clone(self) -> "ParameterStore":
        return ParameterStore((k, v.detach().clone()) for k, v in self._tensors.items())

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().astype(np.float64) for k, v in self._tensors.items()}

    @classmethod
    def from_numpy(cls, arrays: Mapping[str, np.ndarray], dtype=torch.float32) -> "ParameterStore":
        return cls((k, torch.as_tensor(np.asarray(v), dtype=dtype)) for k, v in arrays.items())

    def require(self, names) -> None:
        missing = [n for n in names if n not in self._tensors]
        if missing:
            raise KeyError(f"missing parameters: {', '.join(missing[:5])}"
                           + (" ..." if len(missing) > 5 else ""))

    def bit_equal(self, other: "ParameterStore") -> bool:
        if list(self) != list(other):
            return False
        return all(torch.equal(self._tensors[k], other._tensors[k]) for k in self)


# --- initialization


class _Init:
    def __init__(self, cfg: ModelConfig, seed: int):
        self.store = ParameterStore()
        self.gen = torch.Generator().manual_seed(seed)
        self.dtype = DTYPES[cfg.dtype]

    def uniform(self, name, shape, fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = (torch.rand(shape, generator=self.gen, dtype=torch.float64) * 2 - 1) * limit
        self.store.add(name, w.to(self.dtype))

    def zeros(self, name, shape):
        self.store.add(name, torch.zeros(shape, dtype=self.dtype))

    def ones(self, name, shape):
        self.store.add(name, torch.ones(shape, dtype=self.dtype))

    def linear(self, name, d_in, d_out):
        self.uniform(f"{name}.weight", (d_out, d_in), d_in, d_out)
        self.zeros(f"{name}.bias", (d_out,))

    def conv(self, name, d_in, d_out, k):
        self.uniform(f"{name}.weight", (d_out, d_in, k), d_in * k, d_out * k)
        self.zeros(f"{name}.bias", (d_out,))

    def layer_norm(self, name, d):
        self.ones(f"{name}.gain", (d,))
        self.zeros(f"{name}.bias", (d,))

    def attention(self, name, d):
        for proj in ("q", "k", "v", "o"):
            self.linear(f"{name}.{proj}", d, d)

    def gru(self, name, d_in, h):
        self.uniform(f"{name}.w_ih", (3 * h, d_in), d_in, h)
        self.uniform(f"{name}.w_hh", (3 * h, h), h, h)
        self.zeros(f"{name}.b_ih", (3 * h,))
        self.zeros(f"{name}.b_hh", (3 * h,))

    def conformer_block(self, name, cfg):
        d = cfg.d_hidden
        self.conv(f"{name}.conv", d, d, cfg.conv_kernel)
        self.layer_norm(f"{name}.norm_conv", d)
        self.attention(f"{name}.attn", d)
        self.layer_norm(f"{name}.norm_attn", d)
        self.linear(f"{name}.ff1", d, cfg.d_ff)
        self.linear(f"{name}.ff2", cfg.d_ff, d)
        self.layer_norm(f"{name}.norm_ff", d)


def init_parameters(cfg: ModelConfig) -> ParameterStore:
    """Parameters of the full model (integration block, style encoder, both
    variance predictors, mel generator)."""
    init = _Init(cfg, cfg.seed)
    d, ds = cfg.d_hidden, cfg.d_style
    init.conv("integration.conv", cfg.c_ema + cfg.n_speakers, d, cfg.conv_kernel)
    init.gru("integration.gru", d, d)

    init.linear("style.in_proj", d, ds)
    init.conv("style.conv1", ds, ds, cfg.conv_kernel)
    init.conv("style.conv2", ds, ds, cfg.conv_kernel)
    init.attention("style.attn", ds)
    init.linear("style.out_proj", ds, ds)

    for which in PREDICTORS:
        init.conv(f"{which}.conv1", ds, d, cfg.predictor_kernel)
        init.layer_norm(f"{which}.norm1", d)
        init.conv(f"{which}.conv2", d, d, cfg.predictor_kernel)
        init.layer_norm(f"{which}.norm2", d)
        init.linear(f"{which}.out", d, 1)

    init.linear("generator.in_proj", d + ds, d)
    for i in range(cfg.n_conformer_blocks):
        init.conformer_block(f"generator.blocks.{i}", cfg)
    init.linear("generator.out_proj", d, cfg.n_mels)
    return init.store


def init_baseline_parameters(cfg: ModelConfig) -> ParameterStore:
    init = _Init(cfg, cfg.seed)
    d = cfg.d_hidden
    init.linear("baseline.in_proj", cfg.c_ema, d)
    for i in range(cfg.n_baseline_conv_blocks):
        init.conv(f"baseline.conv.{i}.conv", d, d, cfg.conv_kernel)
        init.layer_norm(f"baseline.conv.{i}.norm", d)
    for i in range(cfg.n_baseline_transformer_layers):
        name = f"baseline.layers.{i}"
        init.attention(f"{name}.attn", d)
        init.layer_norm(f"{name}.norm_attn", d)
        init.linear(f"{name}.ff1", d, cfg.d_ff)
        init.linear(f"{name}.ff2", cfg.d_ff, d)
        init.layer_norm(f"{name}.norm_ff", d)
    init.linear("baseline.out_proj", d, cfg.n_mels)
    return init.store


# --- primitives


def linear(x, p, name):
    return F.linear(x, p[f"{name}.weight"], p[f"{name}.bias"])


def conv1d(x, p, name):
    """Same-padded 1-D convolution over time; x is [T, C_in]."""
    w = p[f"{name}.weight"]
    y = F.conv1d(x.T.unsqueeze(0), w, p[f"{name}.bias"], padding=w.shape[-1] // 2)
    return y.squeeze(0).T


def layer_norm(x, p, name, eps=1e-5):
    return F.layer_norm(x, x.shape[-1:], p[f"{name}.gain"], p[f"{name}.bias"], eps)


def dropout(x, cfg: ModelConfig, training: bool):
    if cfg.dropout > 0 and training:
        return F.dropout(x, cfg.dropout, training=True)
    return x


def sinusoidal_positions(t: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(t, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(t, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


def multi_head_attention(x, p, name, n_heads, positions=None):
    """Full self-attention over frames. ``positions`` (if given) is added to
    the query/key inputs only."""
    t, d = x.shape
    qk_in = x if positions is None else x + positions
    dh = d // n_heads
    q = linear(qk_in, p, f"{name}.q").view(t, n_heads, dh).transpose(0, 1)
    k = linear(qk_in, p, f"{name}.k").view(t, n_heads, dh).transpose(0, 1)
    v = linear(x, p, f"{name}.v").view(t, n_heads, dh).transpose(0, 1)
    scores = q @ k.transpose(1, 2) / math.sqrt(dh)
    ctx = torch.softmax(scores, dim=-1) @ v
    return linear(ctx.transpose(0, 1).reshape(t, d), p, f"{name}.o")


def gru(x, p, name):
    """Unidirectional GRU (PyTorch gate layout r, z, n); zero initial state."""
    w_hh = p[f"{name}.w_hh"]
    b_hh = p[f"{name}.b_hh"]
    h_size = w_hh.shape[1]
    gi = F.linear(x, p[f"{name}.w_ih"], p[f"{name}.b_ih"])
    h = x.new_zeros(h_size)
    out = []
    for t in range(x.shape[0]):
        gh = F.linear(h, w_hh, b_hh)
        i_r, i_z, i_n = gi[t].split(h_size)
        h_r, h_z, h_n = gh.split(h_size)
        r = torch.sigmoid(i_r + h_r)
        z = torch.sigmoid(i_z + h_z)
        n = torch.tanh(i_n + r * h_n)
        h = (1 - z) * n + z * h
        out.append(h)
    return torch.stack(out)


# --- blocks


def one_hot_speaker(speaker_index: int, n_speakers: int) -> np.ndarray:
    if not 0 <= speaker_index < n_speakers:
        raise ValueError(f"speaker index {speaker_index} out of range [0, {n_speakers})")
    v = np.zeros(n_speakers)
    v[speaker_index] = 1.0
    return v


def _as_tensor(x, dtype):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def integration_block(ema, speaker, p, cfg: ModelConfig, training: bool = False):
    """EMA ++ one-hot speaker -> conv + ReLU -> GRU, residual over the GRU."""
    dtype = p["integration.conv.weight"].dtype
    ema = _as_tensor(ema, dtype)
    speaker = _as_tensor(speaker, dtype)
    if ema.ndim != 2 or ema.shape[1] != cfg.c_ema:
        raise ValueError(f"EMA width {tuple(ema.shape)} does not match c_ema={cfg.c_ema}")
    if speaker.shape != (cfg.n_speakers,) or not (
        torch.all((speaker == 0) | (speaker == 1)) and speaker.sum() == 1
    ):
        raise ValueError("speaker vector must be one-hot of length n_speakers")
    x = torch.cat([ema, speaker.expand(ema.shape[0], -1)], dim=1)
    c = torch.relu(conv1d(x, p, "integration.conv"))
    c = dropout(c, cfg, training)
    return c + gru(c, p, "integration.gru")


def style_encoder(h, p, cfg: ModelConfig, training: bool = False):
    """Frame-level style embedding [T, d_style]; no positional information."""
    s = linear(h, p, "style.in_proj")
    for conv in ("style.conv1", "style.conv2"):
        s = s + dropout(torch.relu(conv1d(s, p, conv)), cfg, training)
    s = s + dropout(multi_head_attention(s, p, "style.attn", cfg.n_attn_heads), cfg, training)
    return linear(s, p, "style.out_proj")


def variance_predictor(s, p, cfg: ModelConfig, which: str, training: bool = False):
    """Per-frame dB prediction (length T) from the style embedding."""
    name = {"pitch": "pitch_predictor", "energy": "energy_predictor"}[which]
    y = layer_norm(torch.relu(conv1d(s, p, f"{name}.conv1")), p, f"{name}.norm1")
    y = dropout(y, cfg, training)
    y = layer_norm(torch.relu(conv1d(y, p, f"{name}.conv2")), p, f"{name}.norm2")
    y = dropout(y, cfg, training)
    return linear(y, p, f"{name}.out").squeeze(-1)


def conformer_block(x, p, name, cfg: ModelConfig, training: bool = False):
    x = layer_norm(x + dropout(torch.relu(conv1d(x, p, f"{name}.conv")), cfg, training),
                   p, f"{name}.norm_conv")
    return _attention_ff(x, p, name, cfg, training)


def _attention_ff(x, p, name, cfg, training):
    pe = sinusoidal_positions(x.shape[0], x.shape[1], x.dtype)
    a = multi_head_attention(x, p, f"{name}.attn", cfg.n_attn_heads, positions=pe)
    x = layer_norm(x + dropout(a, cfg, training), p, f"{name}.norm_attn")
    ff = linear(dropout(torch.relu(linear(x, p, f"{name}.ff1")), cfg, training), p, f"{name}.ff2")
    return layer_norm(x + dropout(ff, cfg, training), p, f"{name}.norm_ff")


def mel_generator(h, s, p, cfg: ModelConfig, training: bool = False):
    if h.shape[0] != s.shape[0]:
        raise ValueError(f"frame-count mismatch: hidden {h.shape[0]} vs style {s.shape[0]}")
    x = linear(torch.cat([h, s], dim=1), p, "generator.in_proj")
    for i in range(cfg.n_conformer_blocks):
        x = conformer_block(x, p, f"generator.blocks.{i}", cfg, training)
    return linear(x, p, "generator.out_proj")


def baseline_forward(ema, p, cfg: ModelConfig, training: bool = False):
    """Residual conv blocks then transformer layers; no speaker or style input."""
    dtype = p["baseline.in_proj.weight"].dtype
    x = linear(_as_tensor(ema, dtype), p, "baseline.in_proj")
    for i in range(cfg.n_baseline_conv_blocks):
        name = f"baseline.conv.{i}"
        x = layer_norm(x + dropout(torch.relu(conv1d(x, p, f"{name}.conv")), cfg, training),
                       p, f"{name}.norm")
    for i in range(cfg.n_baseline_transformer_layers):
        x = _attention_ff(x, p, f"baseline.layers.{i}", cfg, training)
    return linear(x, p, "baseline.out_proj")


def forward_train(ema, speaker_index: int, p, cfg: ModelConfig, training: bool = False):
    """Training path: returns (mel, pitch, energy) predictions."""
    h = integration_block(ema, one_hot_speaker(speaker_index, cfg.n_speakers), p, cfg, training)
    s = style_encoder(h, p, cfg, training)
    pitch = variance_predictor(s, p, cfg, "pitch", training)
    energy = variance_predictor(s, p, cfg, "energy", training)
    return mel_generator(h, s, p, cfg, training), pitch, energy
