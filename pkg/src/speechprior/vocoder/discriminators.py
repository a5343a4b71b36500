"""Multi-period (MPD) and multi-band multi-scale STFT (MBMSD) discriminators.

Each discriminator returns a list with one ``(logits, feature_maps)`` pair per
sub-discriminator (period or STFT resolution).
"""

from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm

from ..errors import DataError

LRELU_SLOPE = 0.1
MPD_PERIODS = (2, 3, 5, 7, 11)
MBMSD_RESOLUTIONS = (2048, 1024, 512)
MBMSD_BANDS = ((0.0, 0.1), (0.1, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0))


class PeriodDiscriminator(nn.Module):
    def __init__(self, period: int, channels: Sequence[int] = (32, 128, 512, 1024, 1024),
                 kernel_size: int = 5, stride: int = 3):
        super().__init__()
        self.period = period
        convs = []
        in_ch = 1
        for i, ch in enumerate(channels):
            s = stride if i < len(channels) - 1 else 1
            convs.append(weight_norm(nn.Conv2d(in_ch, ch, (kernel_size, 1), (s, 1),
                                               padding=(kernel_size // 2, 0))))
            in_ch = ch
        self.convs = nn.ModuleList(convs)
        self.conv_post = weight_norm(nn.Conv2d(in_ch, 1, (3, 1), 1, padding=(1, 0)))

    def fold(self, x: torch.Tensor) -> torch.Tensor:
        """[B, N] -> [B, 1, ceil(N / p), p], reflect-padding to a multiple of the period."""
        b, n = x.shape
        if n % self.period:
            pad = self.period - n % self.period
            x = F.pad(x.unsqueeze(1), (0, pad), mode="reflect").squeeze(1)
        return x.view(b, 1, -1, self.period)

    def forward(self, x):
        fmap = []
        h = self.fold(x)
        for conv in self.convs:
            h = F.leaky_relu(conv(h), LRELU_SLOPE)
            fmap.append(h)
        h = self.conv_post(h)
        fmap.append(h)
        return h.flatten(1), fmap


class MultiPeriodDiscriminator(nn.Module):
    def __init__(self, periods: Sequence[int] = MPD_PERIODS,
                 channels: Sequence[int] = (32, 128, 512, 1024, 1024)):
        super().__init__()
        self.periods = tuple(periods)
        self.discriminators = nn.ModuleList(PeriodDiscriminator(p, channels) for p in periods)

    def forward(self, x) -> List[Tuple[torch.Tensor, List[torch.Tensor]]]:
        if x.dim() == 1:
            x = x.unsqueeze(0)
        if x.shape[-1] < max(self.periods):
            raise DataError(f"input of {x.shape[-1]} samples shorter than period {max(self.periods)}")
        return [d(x) for d in self.discriminators]


def band_edges(n_bins: int, bands=MBMSD_BANDS) -> List[Tuple[int, int]]:
    """Contiguous [lo, hi) bin ranges partitioning ``range(n_bins)``."""
    edges = [(int(lo * n_bins), int(hi * n_bins)) for lo, hi in bands]
    edges[-1] = (edges[-1][0], n_bins)
    return edges


class ResolutionDiscriminator(nn.Module):
    def __init__(self, fft_size: int, channels: int = 32, bands=MBMSD_BANDS):
        super().__init__()
        self.fft_size, self.hop = fft_size, fft_size // 4
        self.bands = band_edges(fft_size // 2 + 1, bands)

        def stack():
            return nn.ModuleList([
                weight_norm(nn.Conv2d(2, channels, (3, 9), (1, 1), padding=(1, 4))),
                weight_norm(nn.Conv2d(channels, channels, (3, 9), (1, 2), padding=(1, 4))),
                weight_norm(nn.Conv2d(channels, channels, (3, 9), (1, 2), padding=(1, 4))),
                weight_norm(nn.Conv2d(channels, channels, (3, 9), (1, 2), padding=(1, 4))),
                weight_norm(nn.Conv2d(channels, channels, (3, 3), (1, 1), padding=(1, 1))),
            ])

        self.band_convs = nn.ModuleList(stack() for _ in self.bands)
        self.conv_post = weight_norm(nn.Conv2d(channels, 1, (3, 3), (1, 1), padding=(1, 1)))

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop

    def spectrogram(self, x):
        """[B, N] -> real/imag channels [B, 2, frames, bins]."""
        x = x - x.mean(dim=-1, keepdim=True)
        x = 0.8 * x / (x.abs().max(dim=-1, keepdim=True).values + 1e-9)
        window = torch.hann_window(self.fft_size, dtype=x.dtype, device=x.device)
        spec = torch.stft(x, self.fft_size, self.hop, self.fft_size, window, center=True,
                          return_complex=True)
        return torch.view_as_real(spec).permute(0, 3, 2, 1)

    def forward(self, x):
        spec = self.spectrogram(x)
        fmap, outs = [], []
        for (lo, hi), convs in zip(self.bands, self.band_convs):
            h = spec[..., lo:hi]
            for conv in convs:
                h = F.leaky_relu(conv(h), LRELU_SLOPE)
                fmap.append(h)
            outs.append(h)
        h = self.conv_post(torch.cat(outs, dim=-1))
        fmap.append(h)
        return h.flatten(1), fmap


class MultiBandMultiScaleDiscriminator(nn.Module):
    def __init__(self, resolutions: Sequence[int] = MBMSD_RESOLUTIONS, channels: int = 32):
        super().__init__()
        self.resolutions = tuple(resolutions)
        self.discriminators = nn.ModuleList(ResolutionDiscriminator(n, channels) for n in resolutions)

    def forward(self, x) -> List[Tuple[torch.Tensor, List[torch.Tensor]]]:
        if x.dim() == 1:
            x = x.unsqueeze(0)
        if x.shape[-1] <= max(self.resolutions) // 2:
            raise DataError(f"input of {x.shape[-1]} samples too short for fft {max(self.resolutions)}")
        return [d(x) for d in self.discriminators]


class Discriminators(nn.Module):
    """MPD and MBMSD side by side; their losses are weighted equally."""

    def __init__(self, mpd_channels=(32, 128, 512, 1024, 1024), mbmsd_channels: int = 32,
                 periods=MPD_PERIODS, resolutions=MBMSD_RESOLUTIONS):
        super().__init__()
        self.mpd = MultiPeriodDiscriminator(periods, mpd_channels)
        self.mbmsd = MultiBandMultiScaleDiscriminator(resolutions, mbmsd_channels)

    def forward(self, x):
        """Returns ``(logits_groups, fmap_groups)``: one group per discriminator."""
        groups = [self.mpd(x), self.mbmsd(x)]
        logits = [[out[0] for out in g] for g in groups]
        fmaps = [[out[1] for out in g] for g in groups]
        return logits, fmaps


def toy_discriminators() -> Discriminators:
    return Discriminators(mpd_channels=(8, 16, 32, 32, 32), mbmsd_channels=8)


def mpd_forward(waveform, params: MultiPeriodDiscriminator):
    return params(waveform)


def mbmsd_forward(waveform, params: MultiBandMultiScaleDiscriminator):
    return params(waveform)
