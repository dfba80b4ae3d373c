"""Waveform <-> spectrogram front end: STFT/ISTFT, power-law compression,
mask application and log-mel features.

Fixed pipeline geometry: 16 kHz audio, 512-point FFT, hop 128 (8 ms),
periodic Hann window. That gives 257 magnitude bins and makes a 100-frame
look-back roughly 0.8 s of context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
N_FFT = 512
HOP = 128
D_FFT = N_FFT // 2 + 1

# samples whose squared-window overlap-add gain is below this are emitted
# as zero: dividing by a near-zero gain amplifies float noise and the
# signal there is unrecoverable anyway (affects ~2 ms at stream edges)
MIN_WSUM = 1e-3


class DspError(Exception):
    pass


def hann_window(n=N_FFT):
    # periodic Hann; with hop = n/4 the squared-window overlap-add is a
    # constant 1.5 in the interior (COLA)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)).astype(np.float64)


@dataclass
class Spectrogram:
    """Magnitude frames plus the analysis phase (kept for resynthesis)."""

    mag: np.ndarray  # (t, d_fft), non-negative
    phase: np.ndarray  # (t, d_fft), radians
    hop: int = HOP

    @property
    def n_frames(self):
        return self.mag.shape[0]


def frame_signal(samples, n_fft=N_FFT, hop=HOP):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < n_fft:
        raise DspError(f"need at least {n_fft} samples, got {samples.size}")
    t = 1 + (samples.size - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(t)[:, None]
    return samples[idx]


def stft(samples, n_fft=N_FFT, hop=HOP):
    """Magnitude/phase STFT with t = 1 + floor((len - n_fft) / hop) frames."""
    frames = frame_signal(samples, n_fft, hop)
    spec = np.fft.rfft(frames * hann_window(n_fft)[None, :], axis=1)
    return Spectrogram(
        mag=np.abs(spec).astype(np.float32),
        phase=np.angle(spec).astype(np.float32),
        hop=hop,
    )


def istft(spec, n_fft=N_FFT):
    """Weighted overlap-add inversion using the analysis window; output
    length (t-1)*hop + n_fft."""
    hop = spec.hop
    t = spec.n_frames
    win = hann_window(n_fft)
    cplx = spec.mag.astype(np.float64) * np.exp(1j * spec.phase.astype(np.float64))
    frames = np.fft.irfft(cplx, n=n_fft, axis=1)
    n_out = (t - 1) * hop + n_fft
    acc = np.zeros(n_out)
    wsum = np.zeros(n_out)
    for i in range(t):
        acc[i * hop : i * hop + n_fft] += frames[i] * win
        wsum[i * hop : i * hop + n_fft] += win * win
    out = np.where(wsum > MIN_WSUM, acc / np.maximum(wsum, MIN_WSUM), 0.0)
    return out.astype(np.float32)


def power_law_compress(mag, c):
    """Elementwise mag**c, c in (0, 1]."""
    mag = np.asarray(mag)
    if not 0.0 < c <= 1.0:
        raise DspError(f"compression exponent must be in (0, 1], got {c}")
    if np.any(mag < 0):
        raise DspError("power_law_compress requires non-negative magnitudes")
    return mag**c


def apply_mask(spec, mask):
    """Elementwise magnitude mask; the corrupted phase is retained."""
    mask = np.asarray(mask, dtype=spec.mag.dtype)
    if mask.shape != spec.mag.shape:
        raise DspError(f"mask shape {mask.shape} != spectrogram shape {spec.mag.shape}")
    return Spectrogram(mag=spec.mag * mask, phase=spec.phase, hop=spec.hop)


# ---------------------------------------------------------------------------
# log-mel features (embedder input)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels=40, n_fft=N_FFT, sample_rate=SAMPLE_RATE, fmin=0.0, fmax=None):
    """Triangular mel filters over rfft bins, shape (n_mels, n_fft//2 + 1)."""
    if fmax is None:
        fmax = sample_rate / 2.0
    pts = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, ctr, hi = pts[m], pts[m + 1], pts[m + 2]
        up = (bins - lo) / max(ctr - lo, 1e-9)
        down = (hi - bins) / max(hi - ctr, 1e-9)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb.astype(np.float32)


LOG_MEL_FLOOR = 1e-10


def log_mel(samples, n_mels=40, n_fft=N_FFT, hop=HOP):
    """Log mel-filterbank energies of the power spectrum, (t, n_mels)."""
    spec = stft(samples, n_fft, hop)
    power = spec.mag.astype(np.float64) ** 2
    fb = mel_filterbank(n_mels, n_fft)
    return np.log(power @ fb.T + LOG_MEL_FLOOR).astype(np.float32)
