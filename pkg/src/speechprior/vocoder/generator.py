"""Vocos-style generator: linear in-projection, self-attention, ConvNeXt stack
and a magnitude/phase head inverted with the iSTFT."""

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, DataError


@dataclass
class VocoderConfig:
    in_dim: int = 1024
    hidden_dim: int = 768
    n_blocks: int = 12
    intermediate_dim: int = 2304
    fft_size: int = 1280
    hop: int = 320
    attention: bool = True
    attn_heads: int = 1
    frame_repeat: int = 1  # input frames are repeated to bridge encoder hop / vocoder hop
    mag_activation: str = "exp"  # "exp" (log-magnitude head) or "abs"
    sample_rate: int = 16000

    def __post_init__(self):
        if self.fft_size < self.hop:
            raise ConfigError(f"fft_size {self.fft_size} < hop {self.hop}")
        if self.hidden_dim % self.attn_heads:
            raise ConfigError("attn_heads must divide hidden_dim")
        if self.mag_activation not in ("exp", "abs"):
            raise ConfigError(f"unknown mag_activation {self.mag_activation!r}")
        if self.frame_repeat < 1:
            raise ConfigError("frame_repeat must be >= 1")

    @property
    def input_hop(self) -> int:
        """Samples generated per input feature frame."""
        return self.hop * self.frame_repeat

    def to_dict(self):
        return asdict(self)


def toy_vocoder_config(in_dim: int = 64, **overrides) -> VocoderConfig:
    base = dict(in_dim=in_dim, hidden_dim=32, n_blocks=2, intermediate_dim=96,
                fft_size=256, hop=64, frame_repeat=5)
    return VocoderConfig(**{**base, **overrides})


class SpectralHeadOutput(NamedTuple):
    magnitude: torch.Tensor  # [B, T, F] >= 0
    phase: torch.Tensor  # [B, T, F] in (-pi, pi]


class ConvNeXtBlock(nn.Module):
    def __init__(self, dim: int, intermediate_dim: int, layer_scale: float):
        super().__init__()
        self.dwconv = nn.Conv1d(dim, dim, kernel_size=7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, intermediate_dim)
        self.pwconv2 = nn.Linear(intermediate_dim, dim)
        self.gamma = nn.Parameter(layer_scale * torch.ones(dim))

    def forward(self, x):  # [B, T, C]
        h = self.dwconv(x.transpose(1, 2)).transpose(1, 2)
        h = self.pwconv2(F.gelu(self.pwconv1(self.norm(h))))
        return x + self.gamma * h


class SelfAttentionBlock(nn.Module):
    """Full-context pre-norm self-attention with a residual connection."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)

    def forward(self, x):
        h = self.norm(x)
        return x + self.attn(h, h, h, need_weights=False)[0]


def istft(magnitude, phase, fft_size: int, hop: int, length: int) -> torch.Tensor:
    """Centered Hann iSTFT; ``magnitude``/``phase`` are [B, T, F]."""
    spec = torch.polar(magnitude, phase).transpose(1, 2)
    window = torch.hann_window(fft_size, dtype=magnitude.dtype, device=magnitude.device)
    return torch.istft(spec, fft_size, hop, fft_size, window, center=True, length=length)


def stft(x, fft_size: int, hop: int) -> torch.Tensor:
    """Centered Hann STFT returning complex [B, T, F]."""
    window = torch.hann_window(fft_size, dtype=x.dtype, device=x.device)
    return torch.stft(x, fft_size, hop, fft_size, window, center=True, return_complex=True).transpose(1, 2)


class ISTFTHead(nn.Module):
    def __init__(self, dim: int, fft_size: int, hop: int, mag_activation: str = "exp"):
        super().__init__()
        self.fft_size, self.hop = fft_size, hop
        self.mag_activation = mag_activation
        self.out = nn.Linear(dim, fft_size + 2)

    def spectral(self, x) -> SpectralHeadOutput:
        m, p = self.out(x).chunk(2, dim=-1)
        mag = m.exp() if self.mag_activation == "exp" else m.abs()
        mag = mag.clamp(max=1e2)
        return SpectralHeadOutput(mag, torch.atan2(torch.sin(p), torch.cos(p)))

    def forward(self, x):
        head = self.spectral(x)
        return istft(head.magnitude, head.phase, self.fft_size, self.hop, x.shape[1] * self.hop)


class Vocoder(nn.Module):
    def __init__(self, cfg: VocoderConfig):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.in_dim, cfg.hidden_dim)
        self.norm = nn.LayerNorm(cfg.hidden_dim, eps=1e-6)
        self.attention = SelfAttentionBlock(cfg.hidden_dim, cfg.attn_heads) if cfg.attention else None
        scale = 1.0 / cfg.n_blocks
        self.blocks = nn.ModuleList(
            ConvNeXtBlock(cfg.hidden_dim, cfg.intermediate_dim, scale) for _ in range(cfg.n_blocks))
        self.final_norm = nn.LayerNorm(cfg.hidden_dim, eps=1e-6)
        self.head = ISTFTHead(cfg.hidden_dim, cfg.fft_size, cfg.hop, cfg.mag_activation)
        self.apply(self._init)

    @staticmethod
    def _init(m):
        if isinstance(m, (nn.Conv1d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)

    def backbone(self, features):
        if features.dim() == 2:
            features = features.unsqueeze(0)
        if features.shape[-1] != self.cfg.in_dim:
            raise DataError(f"feature dim {features.shape[-1]} != vocoder in_dim {self.cfg.in_dim}")
        if self.cfg.frame_repeat > 1:
            features = features.repeat_interleave(self.cfg.frame_repeat, dim=1)
        x = self.norm(self.in_proj(features))
        if self.attention is not None:
            x = self.attention(x)
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)

    def spectral(self, features) -> SpectralHeadOutput:
        return self.head.spectral(self.backbone(features))

    def forward(self, features) -> torch.Tensor:
        """[B, T, in_dim] -> [B, T * frame_repeat * hop] waveform."""
        return self.head(self.backbone(features))


def synthesize(features, cfg: VocoderConfig, params: Vocoder) -> torch.Tensor:
    if params.cfg != cfg:
        raise ConfigError("vocoder parameters were built for a different config")
    return params(features)
