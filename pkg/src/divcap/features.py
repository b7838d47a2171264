"""Log-mel spectrogram extraction and SpecAugment-style masking."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import N_MEL_BINS


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class MelParams:
    sample_rate: int = 44100
    window: int = 1024
    hop: int = 512
    n_mels: int = N_MEL_BINS
    log_floor: float = 1e-10

    def __post_init__(self) -> None:
        if self.hop > self.window:
            raise FeatureError("hop must not exceed the window length")
        if self.n_mels != N_MEL_BINS:
            raise FeatureError(f"n_mels is fixed at {N_MEL_BINS}")
        if self.log_floor <= 0:
            raise FeatureError("log floor must be positive")


@dataclass(frozen=True)
class AugmentParams:
    n_time_masks: int = 2
    max_time_width: int = 64
    n_freq_masks: int = 2
    max_freq_width: int = 8

    def __post_init__(self) -> None:
        for name in ("n_time_masks", "max_time_width", "n_freq_masks", "max_freq_width"):
            if getattr(self, name) < 0:
                raise FeatureError(f"{name} must be >= 0")


def _hz_to_mel(hz: np.ndarray | float) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel: np.ndarray | float) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank spanning 0 Hz to Nyquist, shape (n_mels, n_fft//2+1)."""
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(_hz_to_mel(0.0), _hz_to_mel(nyquist), n_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - left) / max(center - left, 1e-12)
        falling = (right - bin_freqs) / max(right - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def log_mel(waveform: np.ndarray, params: MelParams = MelParams()) -> np.ndarray:
    """Natural-log mel energies of a mono waveform, shape (frames, 64).

    Frame count is ``1 + (len - window) // hop``; energies are clamped at the
    log floor before the log, so silence maps to ``log(log_floor)``.
    """
    wave = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if wave.size < params.window:
        raise FeatureError(
            f"waveform has {wave.size} samples, need at least one window ({params.window})"
        )
    n_frames = 1 + (wave.size - params.window) // params.hop
    idx = np.arange(params.window)[None, :] + params.hop * np.arange(n_frames)[:, None]
    frames = wave[idx] * np.hanning(params.window)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    fb = mel_filterbank(params.n_mels, params.window, params.sample_rate)
    mel = power @ fb.T
    return np.log(np.maximum(mel, params.log_floor)).astype(np.float32)


def spec_augment(
    features: np.ndarray,
    params: AugmentParams,
    rng: np.random.Generator,
) -> np.ndarray:
    """Mask random time-frame and mel-bin bands with the per-matrix mean.

    Mask widths are drawn uniformly from [0, max_width] (clamped to the axis
    length), so zero-width masks are no-ops. The input is not modified.
    """
    feats = np.asarray(features)
    if feats.ndim != 2 or feats.size == 0:
        raise FeatureError("feature matrix must be 2-D and nonempty")
    out = feats.copy()
    fill = feats.mean()
    for axis, n_masks, max_width in (
        (0, params.n_time_masks, params.max_time_width),
        (1, params.n_freq_masks, params.max_freq_width),
    ):
        size = feats.shape[axis]
        bound = min(max_width, size)
        for _ in range(n_masks):
            width = int(rng.integers(0, bound + 1))
            if width == 0:
                continue
            start = int(rng.integers(0, size - width + 1))
            if axis == 0:
                out[start : start + width, :] = fill
            else:
                out[:, start : start + width] = fill
    return out


def load_waveform(path: str | Path, expected_rate: int) -> np.ndarray:
    """Read a WAV file as a mono float64 waveform at the expected sample rate."""
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    if rate != expected_rate:
        raise FeatureError(f"{path}: sample rate {rate} != expected {expected_rate} (no resampling)")
    data = np.asarray(data)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return data
