"""Dual-stream conditioning: merge the phonetic (last layer) and acoustic
(first layer) encoder streams before vocoding."""

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, DataError

SCHEMES = ("Add", "Cat", "CrossAttention", "FiLM", "none")


@dataclass
class FusionConfig:
    scheme: str = "Add"
    d_phonetic: int = 1024
    d_acoustic: int = 1024
    n_heads: int = 8
    ffn_mult: int = 4

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"fusion scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.scheme == "CrossAttention" and self.d_phonetic % self.n_heads:
            raise ConfigError(f"n_heads {self.n_heads} does not divide {self.d_phonetic}")

    @property
    def out_dim(self) -> int:
        return 2 * self.d_phonetic if self.scheme == "Cat" else self.d_phonetic

    def to_dict(self):
        return asdict(self)


class CrossAttentionBlock(nn.Module):
    """Pre-norm decoder block: acoustic queries attend over phonetic keys/values."""

    def __init__(self, dim: int, n_heads: int, ffn_mult: int = 4):
        super().__init__()
        self.n_heads, self.head_dim = n_heads, dim // n_heads
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim))

    def attend(self, query: torch.Tensor, memory: torch.Tensor):
        """Attention weights [B, H, Tq, Tk] and per-head context before the output projection."""
        b, tq, d = query.shape
        tk = memory.shape[1]
        q = self.q_proj(query).view(b, tq, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(memory).view(b, tk, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(memory).view(b, tk, self.n_heads, self.head_dim).transpose(1, 2)
        weights = (q @ k.transpose(-1, -2) / self.head_dim ** 0.5).softmax(-1)
        return weights, weights @ v

    def forward(self, query, memory):
        _, ctx = self.attend(self.norm_q(query), self.norm_kv(memory))
        b, _, t, _ = ctx.shape
        x = query + self.out_proj(ctx.transpose(1, 2).reshape(b, t, -1))
        return x + self.ffn(self.norm_ffn(x))


class Fusion(nn.Module):
    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.scheme in ("Add", "Cat", "CrossAttention"):
            self.proj = nn.Linear(cfg.d_acoustic, cfg.d_phonetic, bias=False)
        if cfg.scheme == "CrossAttention":
            self.block = CrossAttentionBlock(cfg.d_phonetic, cfg.n_heads, cfg.ffn_mult)
        if cfg.scheme == "FiLM":
            self.gamma = nn.Linear(cfg.d_acoustic, cfg.d_phonetic)
            self.beta = nn.Linear(cfg.d_acoustic, cfg.d_phonetic)

    @property
    def out_dim(self) -> int:
        return self.cfg.out_dim

    def forward(self, phonetic: torch.Tensor, acoustic: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if phonetic.shape[:-1] != acoustic.shape[:-1]:
            raise DataError(f"stream frame layouts differ: {tuple(phonetic.shape)} vs {tuple(acoustic.shape)}")
        if phonetic.shape[-1] != cfg.d_phonetic or acoustic.shape[-1] != cfg.d_acoustic:
            raise DataError(
                f"expected dims ({cfg.d_phonetic}, {cfg.d_acoustic}), "
                f"got ({phonetic.shape[-1]}, {acoustic.shape[-1]})")
        if cfg.scheme == "none":
            return phonetic
        if cfg.scheme == "Add":
            return self.proj(acoustic) + phonetic
        if cfg.scheme == "Cat":
            return torch.cat([self.proj(acoustic), phonetic], dim=-1)
        if cfg.scheme == "FiLM":
            return self.gamma(acoustic) * phonetic + self.beta(acoustic)
        squeeze = phonetic.dim() == 2
        if squeeze:
            phonetic, acoustic = phonetic.unsqueeze(0), acoustic.unsqueeze(0)
        out = self.block(self.proj(acoustic), phonetic)
        return out[0] if squeeze else out


def fuse(phonetic, acoustic, cfg: FusionConfig, params: Fusion = None) -> torch.Tensor:
    params = params if params is not None else Fusion(cfg)
    return params(phonetic, acoustic)
