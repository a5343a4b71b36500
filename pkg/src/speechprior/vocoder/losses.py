"""Generator/discriminator objectives.

Logits and feature maps come grouped per discriminator (MPD, MBMSD), each
group holding one entry per sub-discriminator.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence, Tuple

import numpy as np
import torch

from ..errors import DataError

MEL_RESOLUTIONS = (2048, 1024, 512)
N_MELS = 80
LOG_FLOOR = 1e-5
LOSS_WEIGHTS = (15.0, 2.0, 1.0)  # reconstruction, adversarial, feature matching


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(n_fft: int, n_mels: int = N_MELS, sample_rate: int = 16000,
                   f_min: float = 0.0, f_max=None) -> np.ndarray:
    """Triangular HTK-scale filters without area normalisation, [n_mels, n_fft // 2 + 1]."""
    f_max = sample_rate / 2 if f_max is None else f_max
    freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    pts = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    diff = np.diff(pts)
    slopes = pts[None, :] - freqs[:, None]
    down = -slopes[:, :-2] / diff[:-1]
    up = slopes[:, 2:] / diff[1:]
    return np.maximum(0.0, np.minimum(down, up)).T


def log_mel(x: torch.Tensor, n_fft: int, n_mels: int = N_MELS, sample_rate: int = 16000) -> torch.Tensor:
    """Log magnitude-mel spectrogram, [B, n_mels, frames]; hop is n_fft / 4."""
    window = torch.hann_window(n_fft, dtype=x.dtype, device=x.device)
    mag = torch.stft(x, n_fft, n_fft // 4, n_fft, window, center=True, return_complex=True).abs()
    fb = torch.as_tensor(mel_filterbank(n_fft, n_mels, sample_rate), dtype=x.dtype, device=x.device)
    return torch.log(torch.clamp(fb @ mag, min=LOG_FLOOR))


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor,
                        resolutions: Sequence[int] = MEL_RESOLUTIONS, n_mels: int = N_MELS,
                        sample_rate: int = 16000) -> torch.Tensor:
    """Multi-resolution log-mel L1, averaged over resolutions."""
    if pred.shape != target.shape:
        raise DataError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if pred.dim() == 1:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    losses = [(log_mel(pred, n, n_mels, sample_rate) - log_mel(target, n, n_mels, sample_rate)).abs().mean()
              for n in resolutions]
    return torch.stack(losses).mean()


def _group_mean(groups, fn):
    """Mean over sub-discriminators inside each group, then equal weight across groups."""
    per_group = [torch.stack([fn(x) for x in group]).mean() for group in groups]
    return torch.stack(per_group).mean()


def discriminator_loss(real_logits, fake_logits) -> torch.Tensor:
    """Least-squares objective: mean (1 - D(x))^2 + mean D(G(z))^2 per sub-discriminator."""
    pairs = [list(zip(r, f)) for r, f in zip(real_logits, fake_logits, strict=True)]
    return _group_mean(pairs, lambda rf: ((1 - rf[0]) ** 2).mean() + (rf[1] ** 2).mean())


def generator_adversarial_loss(fake_logits) -> torch.Tensor:
    return _group_mean(fake_logits, lambda f: ((1 - f) ** 2).mean())


def adversarial_losses(real_logits, fake_logits) -> Tuple[torch.Tensor, torch.Tensor]:
    return discriminator_loss(real_logits, fake_logits), generator_adversarial_loss(fake_logits)


def _flatten_maps(fmaps):
    out = []
    for group in fmaps:
        for sub in group:
            out.extend(sub if isinstance(sub, (list, tuple)) else [sub])
    return out


def feature_matching_loss(real_feats, fake_feats) -> torch.Tensor:
    """Mean over every feature map (both discriminators) of the mean absolute difference."""
    real, fake = _flatten_maps(real_feats), _flatten_maps(fake_feats)
    if len(real) != len(fake) or not real:
        raise DataError("feature map structures differ")
    return torch.stack([(r.detach() - f).abs().mean() for r, f in zip(real, fake)]).mean()


@dataclass
class GanLossBreakdown:
    reconstruction: float
    adversarial: float
    feature_matching: float
    total: float


def generator_total(rec, adv, fm, weights=LOSS_WEIGHTS):
    """Weighted generator objective; returns ``(total, breakdown)``.

    ``total`` keeps the autograd graph when the inputs are tensors.
    """
    w_rec, w_adv, w_fm = weights
    total = w_rec * rec + w_adv * adv + w_fm * fm
    f = lambda v: float(v.detach()) if torch.is_tensor(v) else float(v)
    return total, GanLossBreakdown(f(rec), f(adv), f(fm), f(total))
