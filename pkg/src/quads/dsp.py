"""Log-mel spectrogram frontend (Hann STFT, HTK mel filterbank, natural log)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    n_mels: int = 80
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.fmax is None:
            object.__setattr__(self, "fmax", self.sample_rate / 2)
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={self.fmin}, fmax={self.fmax}"
            )
        if self.window_ms < self.hop_ms:
            raise ValueError("window_ms must be >= hop_ms")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def n_fft(self) -> int:
        return 1 << (self.window_samples - 1).bit_length()

    def num_frames(self, num_samples: int) -> int:
        return (num_samples - self.window_samples) // self.hop_samples + 1


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (n_mels, frames)
    config: MelConfig = field(default_factory=MelConfig)

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    """Peak frequency (Hz) of each triangular filter."""
    pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(pts[1:-1])


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular HTK-scale filters evaluated at the rfft bin frequencies.

    Returns an ``(n_mels, n_fft // 2 + 1)`` matrix. Raises if any filter
    falls between FFT bins and ends up with no support.
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    # the mel round trip can land a few ulps off; pin the outer edges exactly
    edges[0], edges[-1] = cfg.fmin, cfg.fmax
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"n_mels={cfg.n_mels} too large for n_fft={cfg.n_fft}: "
            f"filter {int(empty[0])} has no FFT bin support"
        )
    return fb


def power_spectrogram(wave: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Hann-windowed STFT power, shape ``(n_fft // 2 + 1, frames)``."""
    x = np.asarray(wave, dtype=np.float64)
    win_len, hop = cfg.window_samples, cfg.hop_samples
    if x.ndim != 1:
        raise ShapeError(f"wave must be 1-D, got shape {x.shape}")
    if x.size < win_len:
        raise ShapeError(f"wave has {x.size} samples; at least {win_len} required for one window")
    if not np.all(np.isfinite(x)):
        raise ValueError("wave contains non-finite samples")
    frames = np.lib.stride_tricks.sliding_window_view(x, win_len)[::hop]
    # periodic Hann
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win_len) / win_len)
    spec = np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)
    return (spec.real**2 + spec.imag**2).T


def log_mel(wave, cfg: MelConfig | None = None) -> MelSpectrogram:
    cfg = cfg or MelConfig()
    power = power_spectrogram(wave, cfg)
    mel = mel_filterbank(cfg) @ power
    return MelSpectrogram(np.log(np.maximum(mel, cfg.log_floor)), cfg)
