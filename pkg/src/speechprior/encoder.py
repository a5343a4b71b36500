"""Masked-prediction speech encoder (WavLM-style).

A strided CNN turns 16 kHz audio into 50 Hz frames; a pre-norm transformer
stack with gated relative position bias follows. Every block's output is
exposed so callers can pick the acoustic (first block) and phonetic (last
block) streams.
"""

import math
import os
import re
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import SAMPLE_RATE
from .errors import AssetError, CheckpointError, ConfigError, DataError

WAVLM_CONV_LAYERS = ((10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2))

# HuBERT-style spans: 8% of frames start a 10-frame span
DEFAULT_MASK_SPAN = 10
DEFAULT_MASK_RATIO = 1.0 - (1.0 - 0.08) ** DEFAULT_MASK_SPAN

ASSET_ENV = "SPEECHPRIOR_ASSETS"


@dataclass
class EncoderConfig:
    n_layers: int = 4
    model_dim: int = 64
    n_heads: int = 4
    ffn_dim: int = 256
    conv_dim: int = 64
    conv_layers: Sequence[Tuple[int, int]] = WAVLM_CONV_LAYERS
    frame_rate_hz: float = 50.0
    extractor_mode: str = "layer_norm"  # or "group_norm"
    conv_bias: bool = False
    normalize_waveform: bool = False
    pad_input: bool = True
    pos_conv_kernel: int = 16
    pos_conv_groups: int = 4
    num_buckets: int = 32
    max_distance: int = 100
    dropout: float = 0.0
    preset: str = "custom"

    def __post_init__(self):
        self.conv_layers = tuple(tuple(int(v) for v in kv) for kv in self.conv_layers)
        if self.model_dim % self.n_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.hop * self.frame_rate_hz != SAMPLE_RATE:
            raise ConfigError(
                f"cnn stride product {self.hop} x frame rate {self.frame_rate_hz} != {SAMPLE_RATE}")
        if self.extractor_mode not in ("layer_norm", "group_norm"):
            raise ConfigError(f"unknown extractor_mode {self.extractor_mode!r}")

    @property
    def cnn_strides(self) -> List[int]:
        return [s for _, s in self.conv_layers]

    @property
    def hop(self) -> int:
        return int(np.prod(self.cnn_strides))

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k, s in self.conv_layers:
            rf += (k - 1) * jump
            jump *= s
        return rf

    def n_frames(self, n_samples: int) -> int:
        n = n_samples + (self.receptive_field - self.hop if self.pad_input else 0)
        for k, s in self.conv_layers:
            n = (n - k) // s + 1
        return max(n, 0)

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "toy": dict(n_layers=4, model_dim=64, n_heads=4, ffn_dim=256, conv_dim=64),
    "base": dict(n_layers=12, model_dim=768, n_heads=12, ffn_dim=3072, conv_dim=512,
                 extractor_mode="group_norm", pad_input=False, pos_conv_kernel=128,
                 pos_conv_groups=16, num_buckets=320, max_distance=800),
    "large": dict(n_layers=24, model_dim=1024, n_heads=16, ffn_dim=4096, conv_dim=512,
                  normalize_waveform=True, pad_input=False, pos_conv_kernel=128,
                  pos_conv_groups=16, num_buckets=320, max_distance=800),
}


def preset_config(name: str, **overrides) -> EncoderConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown encoder preset {name!r}; choose from {sorted(PRESETS)}")
    return EncoderConfig(**{**PRESETS[name], **overrides, "preset": name})


@dataclass
class MaskSpec:
    masked_frame_indices: np.ndarray
    span_length: int = DEFAULT_MASK_SPAN
    mask_ratio: float = DEFAULT_MASK_RATIO
    n_frames: Optional[int] = None

    def __post_init__(self):
        self.masked_frame_indices = np.unique(np.asarray(self.masked_frame_indices, dtype=np.int64))

    def __len__(self):
        return int(self.masked_frame_indices.size)

    def to_bool(self, n_frames: int) -> np.ndarray:
        idx = self.masked_frame_indices
        if idx.size and (idx.min() < 0 or idx.max() >= n_frames):
            raise DataError(f"mask index out of range for {n_frames} frames")
        out = np.zeros(n_frames, dtype=bool)
        out[idx] = True
        return out


def make_mask(n_frames: int, mask_ratio: float = DEFAULT_MASK_RATIO,
              span_length: int = DEFAULT_MASK_SPAN,
              rng: Optional[np.random.Generator] = None) -> MaskSpec:
    """Sample non-overlapping spans covering ``round(mask_ratio * n_frames)`` frames.

    Span starts are drawn uniformly over all non-overlapping placements, so
    coverage is exact rather than approximate.
    """
    if n_frames <= 0:
        raise DataError("cannot mask a zero-length sequence")
    if not 0.0 <= mask_ratio <= 1.0:
        raise ConfigError(f"mask_ratio must lie in [0, 1], got {mask_ratio}")
    if span_length < 1:
        raise ConfigError("span_length must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    target = int(round(mask_ratio * n_frames))
    lengths = [span_length] * (target // span_length)
    if target % span_length:
        lengths.append(target % span_length)
    free = n_frames - target
    n_spans = len(lengths)
    slots = np.sort(rng.choice(free + n_spans, size=n_spans, replace=False)) if n_spans else []
    idx, covered = [], 0
    for i, (slot, length) in enumerate(zip(slots, lengths)):
        start = int(slot) - i + covered
        idx.extend(range(start, start + length))
        covered += length
    return MaskSpec(np.array(idx, dtype=np.int64), span_length, mask_ratio, n_frames)


@dataclass
class EncoderActivations:
    """``cnn_features``: [B, T, conv_dim]; ``layers[i]``: [B, T, model_dim].

    ``layers[0]`` is the transformer input (projection plus positional conv),
    ``layers[i]`` the output of block ``i``.
    """

    cnn_features: torch.Tensor
    layers: List[torch.Tensor] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return self.cnn_features.shape[1]


class _ChannelLayerNorm(nn.LayerNorm):
    def forward(self, x):
        return super().forward(x.transpose(1, 2)).transpose(1, 2)


class FeatureExtractor(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        layers = []
        in_ch = 1
        for i, (k, s) in enumerate(cfg.conv_layers):
            conv = nn.Conv1d(in_ch, cfg.conv_dim, k, stride=s, bias=cfg.conv_bias)
            nn.init.kaiming_normal_(conv.weight)
            if cfg.extractor_mode == "layer_norm":
                norm = _ChannelLayerNorm(cfg.conv_dim)
            elif i == 0:
                norm = nn.GroupNorm(cfg.conv_dim, cfg.conv_dim)
            else:
                norm = nn.Identity()
            layers.append(nn.Sequential(conv, norm, nn.GELU()))
            in_ch = cfg.conv_dim
        self.conv_layers = nn.ModuleList(layers)

    def forward(self, wav):
        x = wav.unsqueeze(1)
        for layer in self.conv_layers:
            x = layer(x)
        return x


def relative_position_bucket(rel: torch.Tensor, num_buckets: int, max_distance: int) -> torch.Tensor:
    """Bidirectional log-spaced buckets (T5 / WavLM convention)."""
    num_buckets //= 2
    buckets = (rel > 0).long() * num_buckets
    rel = rel.abs()
    max_exact = num_buckets // 2
    is_small = rel < max_exact
    large = max_exact + (
        torch.log(rel.float().clamp(min=1) / max_exact) / math.log(max_distance / max_exact)
        * (num_buckets - max_exact)
    ).long()
    large = large.clamp(max=num_buckets - 1)
    return buckets + torch.where(is_small, rel, large)


class GatedRelPosAttention(nn.Module):
    def __init__(self, dim, n_heads, num_buckets, max_distance, has_bias, dropout=0.0):
        super().__init__()
        self.n_heads, self.head_dim = n_heads, dim // n_heads
        self.scaling = self.head_dim ** -0.5
        self.num_buckets, self.max_distance = num_buckets, max_distance
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.grep_linear = nn.Linear(self.head_dim, 8)
        self.grep_a = nn.Parameter(torch.ones(1, n_heads, 1, 1))
        self.relative_attention_bias = nn.Embedding(num_buckets, n_heads) if has_bias else None
        self.dropout = dropout

    def compute_bias(self, t: int, device) -> torch.Tensor:
        pos = torch.arange(t, device=device)
        buckets = relative_position_bucket(pos[None, :] - pos[:, None], self.num_buckets,
                                           self.max_distance)
        return self.relative_attention_bias(buckets).permute(2, 0, 1)  # [H, T, T]

    def forward(self, x, pos_bias=None):
        b, t, d = x.shape
        if pos_bias is None and self.relative_attention_bias is not None:
            pos_bias = self.compute_bias(t, x.device)
        split = lambda y: y.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        q = split(self.q_proj(x)) * self.scaling
        k, v = split(self.k_proj(x)), split(self.v_proj(x))
        scores = q @ k.transpose(-1, -2)
        if pos_bias is not None:
            gate_a, gate_b = torch.sigmoid(
                self.grep_linear(split(x)).view(b, self.n_heads, t, 2, 4).sum(-1)
            ).chunk(2, dim=-1)
            gate = gate_a * (gate_b * self.grep_a - 1.0) + 2.0
            scores = scores + gate * pos_bias.unsqueeze(0)
        attn = F.dropout(scores.softmax(-1), self.dropout, self.training)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.out_proj(out), pos_bias


class EncoderLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig, has_bias: bool):
        super().__init__()
        self.self_attn = GatedRelPosAttention(cfg.model_dim, cfg.n_heads, cfg.num_buckets,
                                              cfg.max_distance, has_bias, cfg.dropout)
        self.self_attn_layer_norm = nn.LayerNorm(cfg.model_dim)
        self.fc1 = nn.Linear(cfg.model_dim, cfg.ffn_dim)
        self.fc2 = nn.Linear(cfg.ffn_dim, cfg.model_dim)
        self.final_layer_norm = nn.LayerNorm(cfg.model_dim)
        self.dropout = cfg.dropout

    def forward(self, x, pos_bias=None):
        h, pos_bias = self.self_attn(self.self_attn_layer_norm(x), pos_bias)
        x = x + F.dropout(h, self.dropout, self.training)
        h = self.fc2(F.gelu(self.fc1(self.final_layer_norm(x))))
        return x + F.dropout(h, self.dropout, self.training), pos_bias


class PositionalConv(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        k = cfg.pos_conv_kernel
        conv = nn.Conv1d(cfg.model_dim, cfg.model_dim, k, padding=k // 2, groups=cfg.pos_conv_groups)
        nn.init.normal_(conv.weight, 0, math.sqrt(4 / (k * cfg.model_dim)))
        nn.init.zeros_(conv.bias)
        self.conv = nn.utils.parametrizations.weight_norm(conv, name="weight", dim=2)
        self.trim = 1 if k % 2 == 0 else 0

    def forward(self, x):
        y = self.conv(x.transpose(1, 2))
        if self.trim:
            y = y[..., :-self.trim]
        return F.gelu(y).transpose(1, 2)


class SpeechEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.feature_extractor = FeatureExtractor(cfg)
        self.layer_norm = nn.LayerNorm(cfg.conv_dim)
        self.post_extract_proj = nn.Linear(cfg.conv_dim, cfg.model_dim)
        self.mask_emb = nn.Parameter(torch.empty(cfg.conv_dim).uniform_())
        self.pos_conv = PositionalConv(cfg)
        self.layers = nn.ModuleList(EncoderLayer(cfg, i == 0) for i in range(cfg.n_layers))
        self.final_layer_norm = nn.LayerNorm(cfg.model_dim)

    @property
    def hop(self) -> int:
        return self.cfg.hop

    def cnn(self, wav: torch.Tensor) -> torch.Tensor:
        if wav.dim() == 1:
            wav = wav.unsqueeze(0)
        if self.cfg.normalize_waveform:
            wav = F.layer_norm(wav, wav.shape[-1:])
        if self.cfg.pad_input:
            extra = self.cfg.receptive_field - self.cfg.hop
            wav = F.pad(wav, (extra // 2, extra - extra // 2))
        return self.layer_norm(self.feature_extractor(wav).transpose(1, 2))

    def apply_mask(self, cnn_features: torch.Tensor, mask) -> torch.Tensor:
        """Replace masked frames with the mask embedding; other rows pass through untouched."""
        if mask is None:
            return cnn_features
        b, t, _ = cnn_features.shape
        if isinstance(mask, MaskSpec):
            mask = mask.to_bool(t)
        mask = torch.as_tensor(mask, dtype=torch.bool, device=cnn_features.device)
        if mask.dim() == 1:
            mask = mask.unsqueeze(0).expand(b, -1)
        if mask.shape != (b, t):
            raise DataError(f"mask shape {tuple(mask.shape)} does not match features ({b}, {t})")
        return torch.where(mask.unsqueeze(-1), self.mask_emb.to(cnn_features.dtype), cnn_features)

    def transformer(self, cnn_features: torch.Tensor, upto: Optional[int] = None) -> List[torch.Tensor]:
        x = self.post_extract_proj(cnn_features)
        x = x + self.pos_conv(x)
        outs = [x]
        pos_bias = None
        for i, layer in enumerate(self.layers, 1):
            x, pos_bias = layer(x, pos_bias)
            outs.append(x)
            if upto is not None and i >= upto:
                break
        return outs

    def forward(self, wav: torch.Tensor, mask=None, upto: Optional[int] = None) -> EncoderActivations:
        cnn = self.apply_mask(self.cnn(wav), mask)
        return EncoderActivations(cnn, self.transformer(cnn, upto))

    encode = forward


def build_encoder(cfg: EncoderConfig, seed: Optional[int] = 0) -> SpeechEncoder:
    if seed is None:
        return SpeechEncoder(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SpeechEncoder(cfg)


# Reference (fairseq-style WavLM) parameter names -> internal names.
CHECKPOINT_NAME_TABLE = [
    (r"^feature_extractor\.conv_layers\.(\d+)\.0\.weight$", r"feature_extractor.conv_layers.\1.0.weight"),
    (r"^feature_extractor\.conv_layers\.(\d+)\.0\.bias$", r"feature_extractor.conv_layers.\1.0.bias"),
    (r"^feature_extractor\.conv_layers\.(\d+)\.2\.1\.(weight|bias)$", r"feature_extractor.conv_layers.\1.1.\2"),
    (r"^feature_extractor\.conv_layers\.0\.2\.(weight|bias)$", r"feature_extractor.conv_layers.0.1.\1"),
    (r"^layer_norm\.(weight|bias)$", r"layer_norm.\1"),
    (r"^post_extract_proj\.(weight|bias)$", r"post_extract_proj.\1"),
    (r"^encoder\.pos_conv\.0\.bias$", r"pos_conv.conv.bias"),
    (r"^encoder\.pos_conv\.0\.weight_g$", r"pos_conv.conv.parametrizations.weight.original0"),
    (r"^encoder\.pos_conv\.0\.weight_v$", r"pos_conv.conv.parametrizations.weight.original1"),
    (r"^encoder\.layers\.(\d+)\.(.+)$", r"layers.\1.\2"),
    (r"^encoder\.layer_norm\.(weight|bias)$", r"final_layer_norm.\1"),
]

# pretraining-only heads with no counterpart here
_IGNORED = re.compile(r"^(mask_emb|final_proj\..*|label_embs_concat|layer_norm_post\..*|project_q\..*|quantizer\..*)$")


def translate_reference_state(state: dict) -> dict:
    out = {}
    for name, value in state.items():
        if _IGNORED.match(name):
            continue
        for pattern, repl in CHECKPOINT_NAME_TABLE:
            if re.match(pattern, name):
                out[re.sub(pattern, repl, name)] = value
                break
        else:
            raise CheckpointError(f"unmapped reference parameter {name!r}")
    return out


def _config_from_reference(cfg: dict) -> EncoderConfig:
    """Map a reference model config onto ``EncoderConfig``."""
    try:
        conv = eval(cfg.get("conv_feature_layers", "[(512,10,5)] + [(512,3,2)] * 4 + [(512,2,2)] * 2"),
                    {"__builtins__": {}})
        conv_dims = {c[0] for c in conv}
        if len(conv_dims) != 1:
            raise CheckpointError("reference CNN with varying channel widths is not supported")
        if not cfg.get("relative_position_embedding", True) or not cfg.get("gru_rel_pos", True):
            raise CheckpointError("reference model lacks gated relative position bias")
        if not cfg.get("layer_norm_first", True):
            raise CheckpointError("post-norm reference models are not supported")
        hop = int(np.prod([c[2] for c in conv]))
        return EncoderConfig(
            n_layers=cfg.get("encoder_layers", 12),
            model_dim=cfg.get("encoder_embed_dim", 768),
            n_heads=cfg.get("encoder_attention_heads", 12),
            ffn_dim=cfg.get("encoder_ffn_embed_dim", 3072),
            conv_dim=conv_dims.pop(),
            conv_layers=[(c[1], c[2]) for c in conv],
            frame_rate_hz=SAMPLE_RATE / hop,
            extractor_mode="layer_norm" if cfg.get("extractor_mode") == "layer_norm" else "group_norm",
            conv_bias=bool(cfg.get("conv_bias", False)),
            normalize_waveform=bool(cfg.get("normalize", False)),
            pad_input=False,
            pos_conv_kernel=cfg.get("conv_pos", 128),
            pos_conv_groups=cfg.get("conv_pos_groups", 16),
            num_buckets=cfg.get("num_buckets", 320),
            max_distance=cfg.get("max_distance", 800),
            preset="reference",
        )
    except (ConfigError, TypeError, SyntaxError, NameError) as e:
        raise CheckpointError(f"reference config does not describe a supported encoder: {e}") from e


def save_encoder(encoder: SpeechEncoder, path: str, **extra) -> None:
    torch.save({"format": "speechprior.encoder/1", "config": encoder.cfg.to_dict(),
                "state_dict": encoder.state_dict(), **extra}, path)


def load_pretrained(checkpoint: str, seed: int = 0) -> SpeechEncoder:
    """Build an encoder from a preset name or a checkpoint file.

    Preset names (``toy``, ``base``, ``large``) give a randomly initialised
    model under ``seed``. Files may be this package's own encoder checkpoints
    or reference WavLM checkpoints (``{"cfg": ..., "model": state_dict}``).
    """
    if checkpoint in PRESETS:
        return build_encoder(preset_config(checkpoint), seed)
    if not os.path.exists(checkpoint):
        raise AssetError(f"checkpoint {checkpoint!r} not found")
    try:
        blob = torch.load(checkpoint, map_location="cpu", weights_only=False)
    except Exception as e:  # truncated / corrupted pickles raise assorted types
        raise CheckpointError(f"unreadable checkpoint {checkpoint!r} (architecture mismatch?): {e}") from e
    if not isinstance(blob, dict):
        raise CheckpointError(f"{checkpoint!r} is not a checkpoint dictionary")
    if blob.get("format") == "speechprior.encoder/1":
        cfg, state = EncoderConfig(**blob["config"]), blob["state_dict"]
    elif "model" in blob and "cfg" in blob:
        ref_cfg = blob["cfg"]
        ref_cfg = ref_cfg.get("model", ref_cfg) if isinstance(ref_cfg, dict) else vars(ref_cfg)
        cfg, state = _config_from_reference(ref_cfg), translate_reference_state(blob["model"])
    elif "encoder" in blob and isinstance(blob["encoder"], dict):
        cfg, state = EncoderConfig(**blob["encoder"]["config"]), blob["encoder"]["state_dict"]
    else:
        raise CheckpointError(f"{checkpoint!r}: unrecognised checkpoint layout")
    model = SpeechEncoder(cfg)
    own = model.state_dict()
    missing = sorted(set(own) - set(state) - {"mask_emb"})
    unexpected = sorted(set(state) - set(own))
    bad_shape = [k for k in state if k in own and own[k].shape != state[k].shape]
    if missing or unexpected or bad_shape:
        raise CheckpointError(
            f"architecture mismatch: missing={missing[:5]} unexpected={unexpected[:5]} shape={bad_shape[:5]}")
    model.load_state_dict(state, strict=False)
    model.eval()
    return model


def asset_dir(explicit: Optional[str] = None) -> str:
    return explicit or os.environ.get(ASSET_ENV, os.path.join(os.getcwd(), "assets"))


def require_asset(name: str, directory: Optional[str] = None) -> str:
    path = os.path.join(asset_dir(directory), name)
    if not os.path.exists(path):
        raise AssetError(
            f"{path} is missing. Download WavLM-Large.pt from "
            "https://github.com/microsoft/unilm/tree/master/wavlm and place it under "
            f"the asset directory (set ${ASSET_ENV} or pass --asset_dir).")
    return path


@torch.no_grad()
def verify_golden(encoder: SpeechEncoder, golden_path: str, tol: float = 1e-4) -> float:
    """Compare against stored reference activations; returns the max-abs deviation.

    The golden file holds ``{"probe": [N] tensor, "layers": {index: [T, D] tensor}}``.
    """
    golden = torch.load(golden_path, map_location="cpu")
    acts = encoder.eval()(golden["probe"].float())
    worst = 0.0
    for idx, ref in golden["layers"].items():
        got = acts.layers[int(idx)][0]
        if got.shape != ref.shape:
            raise CheckpointError(f"layer {idx}: shape {tuple(got.shape)} != golden {tuple(ref.shape)}")
        worst = max(worst, float((got - ref).abs().max()))
    if worst > tol:
        raise CheckpointError(f"golden activation deviation {worst:.3g} exceeds {tol}")
    return worst
