"""Frame-by-frame enhancement sessions with bounded state.

A session owns per-layer KV caches, the immutable per-speaker profile
cache, a sample buffer for STFT framing and an overlap-add tail. One hop
of enhanced audio is emitted per completed analysis frame, so the
algorithmic latency is n_fft samples of buffering plus one hop.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .model import ModelError


class SessionError(Exception):
    pass


@dataclass
class StreamStats:
    latencies: list  # seconds per emitted frame
    rtf: float  # compute time / audio duration
    frames: int
    p: int  # enrolment rows

    @property
    def median_latency(self):
        return float(np.median(self.latencies)) if self.latencies else 0.0

    @property
    def p95_latency(self):
        return float(np.percentile(self.latencies, 95)) if self.latencies else 0.0


class StreamSession:
    """Single-owner streaming state over an immutable model + profile cache."""

    def __init__(self, model, profile_cache):
        if model.cfg.variant != profile_cache.variant:
            raise ModelError(
                f"model variant {model.cfg.variant!r} does not match profile "
                f"cache variant {profile_cache.variant!r}"
            )
        if model.cfg.variant == "cross" and (
            profile_cache.h_proj is None or profile_cache.layer_kv is None
        ):
            raise ModelError("cross-variant session needs projected enrolment K/V in the cache")
        self.model = model
        self.cache = profile_cache
        self.enc_caches, self.dec_caches = model.new_caches()
        self._win = dsp.hann_window()
        self._buf = np.zeros(0, dtype=np.float64)
        self._ola_acc = np.zeros(dsp.N_FFT)
        self._ola_wsum = np.zeros(dsp.N_FFT)
        self.frames = 0
        self.latencies = []
        self.samples_in = 0
        self.closed = False

    def push_samples(self, samples):
        """Feed raw samples; returns whatever enhanced audio became final
        (one hop per completed frame, possibly empty)."""
        if self.closed:
            raise SessionError("session is closed")
        samples = np.asarray(samples, dtype=np.float64).reshape(-1)
        self._buf = np.concatenate([self._buf, samples])
        self.samples_in += samples.size
        out = []
        while self._buf.size >= dsp.N_FFT:
            t0 = time.perf_counter()
            out.append(self._process_frame(self._buf[: dsp.N_FFT]))
            self._buf = self._buf[dsp.HOP :]
            self.latencies.append(time.perf_counter() - t0)
            self.frames += 1
        if not out:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate(out)

    def _process_frame(self, frame):
        spec = np.fft.rfft(frame * self._win)
        # quantize exactly like the offline Spectrogram so both paths see
        # identical inputs
        mag = np.abs(spec).astype(np.float32)
        phase = np.angle(spec).astype(np.float32)
        mask = self.model.step_frame(
            mag.astype(self.model.dtype), self.enc_caches, self.dec_caches, self.cache
        )
        enhanced_mag = (mag * mask.astype(np.float32)).astype(np.float64)
        enhanced = np.fft.irfft(enhanced_mag * np.exp(1j * phase.astype(np.float64)), n=dsp.N_FFT)
        self._ola_acc += enhanced * self._win
        self._ola_wsum += self._win * self._win
        hop = dsp.HOP
        wsum = self._ola_wsum[:hop]
        chunk = np.where(
            wsum > dsp.MIN_WSUM, self._ola_acc[:hop] / np.maximum(wsum, dsp.MIN_WSUM), 0.0
        )
        self._ola_acc[:-hop] = self._ola_acc[hop:]
        self._ola_acc[-hop:] = 0.0
        self._ola_wsum[:-hop] = self._ola_wsum[hop:]
        self._ola_wsum[-hop:] = 0.0
        return chunk.astype(np.float32)

    def close(self):
        """Drop the buffered tail (< one frame of samples) and seal the
        session."""
        self.closed = True

    def stats(self):
        audio_s = self.frames * dsp.HOP / dsp.SAMPLE_RATE
        rtf = float(sum(self.latencies)) / audio_s if audio_s > 0 else 0.0
        return StreamStats(
            latencies=list(self.latencies), rtf=rtf, frames=self.frames, p=self.cache.p
        )


def open_session(model, profile_cache):
    return StreamSession(model, profile_cache)


def stream_enhance(model, profile_cache, samples, block=dsp.HOP):
    """Run a full clip through a session in fixed-size blocks; returns
    (enhanced waveform, StreamStats)."""
    session = open_session(model, profile_cache)
    out = []
    samples = np.asarray(samples)
    for i in range(0, samples.size, block):
        out.append(session.push_samples(samples[i : i + block]))
    session.close()
    stats = session.stats()
    return (np.concatenate(out) if out else np.zeros(0, dtype=np.float32)), stats
