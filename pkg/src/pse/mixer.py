"""Synthetic speaker corpus and corruption pipeline.

Builds (corrupted, clean, enrolment) triples: harmonic synthetic speakers
stand in for corpus speech, ambient noise is spectrally shaped noise,
babble is speech from a different speaker, and 10% of examples stay clean
with low-level white noise. Mixing hits the requested SNR exactly.

Everything is reproducible: each example derives its RNG stream from
(global seed, example index), so serial and parallel generation agree.
"""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import SAMPLE_RATE

log = logging.getLogger(__name__)

NOISE_KINDS = ("ambient", "babble", "clean")

SILENCE_RMS_FRACTION = 1e-3  # frame RMS below this fraction of peak = silence
SILENCE_FRAME = int(0.02 * SAMPLE_RATE)
CLEAN_KIND_SNR = (25.0, 40.0)  # "small amount of white noise" for clean kind


class MixerError(Exception):
    pass


# ---------------------------------------------------------------------------
# WAV I/O (16-bit PCM mono 16 kHz)


def write_wav(path, samples):
    samples = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())


def read_wav(path):
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2 or f.getframerate() != SAMPLE_RATE:
            raise MixerError(f"{path}: expected 16-bit mono {SAMPLE_RATE} Hz WAV")
        pcm = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return (pcm / 32767.0).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic speakers


@dataclass
class SpeakerSpec:
    """Deterministic voice recipe: base pitch plus a fixed spectral
    envelope (log-frequency bumps over a tilt)."""

    speaker_id: int
    base_pitch: float
    bump_centers: np.ndarray  # Hz
    bump_widths: np.ndarray  # log10-Hz units
    bump_gains: np.ndarray
    tilt: float
    seed: int

    def envelope(self, freqs):
        freqs = np.maximum(np.asarray(freqs, dtype=np.float64), 1.0)
        lf = np.log10(freqs)
        env = np.full_like(lf, 0.2)
        for c, w, g in zip(self.bump_centers, self.bump_widths, self.bump_gains):
            env = env + g * np.exp(-((lf - np.log10(c)) ** 2) / (2.0 * w * w))
        return env * (freqs / 1000.0) ** self.tilt


def speaker_pool(n_speakers, seed=0):
    """Distinct voices: evenly spread pitches with jitter, random envelopes."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    pitches = np.linspace(90.0, 260.0, n_speakers) + rng.uniform(-6, 6, n_speakers)
    rng.shuffle(pitches)
    pool = []
    for i in range(n_speakers):
        pool.append(
            SpeakerSpec(
                speaker_id=i,
                base_pitch=float(pitches[i]),
                bump_centers=rng.uniform(300.0, 4500.0, size=3),
                bump_widths=rng.uniform(0.15, 0.45, size=3),
                bump_gains=rng.uniform(0.5, 1.8, size=3),
                tilt=float(rng.uniform(-0.6, -0.2)),
                seed=int(rng.integers(0, 2**31)),
            )
        )
    return pool


def synth_utterance(spec, utterance_index, duration):
    """Harmonic source with vibrato, pitch drift and syllable-like gating,
    filtered by the speaker envelope. Deterministic per (spec, index)."""
    if duration < 0.5:
        raise MixerError("utterance duration must be >= 0.5 s")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, int(utterance_index)]))
    n = int(duration * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE

    # pitch contour: vibrato plus a slow random drift (in octaves)
    vib = 0.02 * np.sin(2 * np.pi * rng.uniform(4.0, 7.0) * t + rng.uniform(0, 2 * np.pi))
    knots = rng.uniform(-0.12, 0.12, size=8)
    drift = np.interp(t, np.linspace(0, duration, 8), knots)
    f0 = spec.base_pitch * 2.0 ** (vib + drift)
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE

    n_harm = max(3, int(7000.0 / spec.base_pitch))
    h = np.arange(1, n_harm + 1)
    amps = spec.envelope(h * spec.base_pitch)
    amps = amps / np.sqrt((amps**2).sum())
    phases = rng.uniform(0, 2 * np.pi, size=n_harm)
    sig = np.sin(phase[:, None] * h[None, :] + phases[None, :]) @ amps

    # syllable gating: voiced stretches separated by short pauses
    gate = np.zeros(n)
    edge = int(0.02 * SAMPLE_RATE)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
    pos = 0
    while pos < n:
        voiced = int(rng.uniform(0.15, 0.40) * SAMPLE_RATE)
        seg = slice(pos, min(pos + voiced, n))
        gate[seg] = 1.0
        m = seg.stop - seg.start
        gate[seg.start : seg.start + min(edge, m)] *= ramp[: min(edge, m)]
        if m > edge:
            gate[seg.stop - edge : seg.stop] *= ramp[::-1]
        pos = seg.stop + int(rng.uniform(0.03, 0.12) * SAMPLE_RATE)
    slow = 1.0 + 0.25 * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * t + rng.uniform(0, 2 * np.pi))
    sig = sig * gate * slow

    peak = np.abs(sig).max()
    if peak > 0:
        sig = sig * (0.95 / peak)
    return sig.astype(np.float32)


def ambient_noise(rng, n):
    """Non-speech environmental stand-in: 1/f^a shaped noise plus a weak
    random hum."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
    alpha = rng.uniform(0.5, 1.5)
    spec *= (1.0 + f / 50.0) ** (-alpha)
    sig = np.fft.irfft(spec, n=n)
    hum_f = rng.uniform(50.0, 300.0)
    sig = sig + 0.1 * sig.std() * np.sin(2 * np.pi * hum_f * np.arange(n) / SAMPLE_RATE)
    sig = sig / max(np.abs(sig).max(), 1e-9) * 0.95
    return sig.astype(np.float32)


# ---------------------------------------------------------------------------
# mixing


def fit_length(noise, n):
    """Loop/crop noise to exactly n samples."""
    noise = np.asarray(noise)
    if noise.size == 0:
        raise MixerError("empty noise signal")
    if noise.size < n:
        noise = np.tile(noise, n // noise.size + 1)
    return noise[:n]


def mix_at_snr(clean, noise, snr_db):
    """clean + scaled noise with 10*log10(E_clean / E_noise_scaled) == snr_db
    exactly (full-clip energies)."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise MixerError(f"length mismatch: clean {clean.shape}, noise {noise.shape}")
    e_clean = float((clean**2).sum())
    e_noise = float((noise**2).sum())
    if e_clean <= 0 or e_noise <= 0:
        raise MixerError("mix_at_snr requires nonzero clean and noise energy")
    scale = np.sqrt(e_clean / (e_noise * 10.0 ** (snr_db / 10.0)))
    return (clean + scale * noise).astype(np.float32)


def trim_silence(samples, frame=SILENCE_FRAME, rms_fraction=SILENCE_RMS_FRACTION):
    """Drop frames whose RMS is below rms_fraction of the utterance peak."""
    samples = np.asarray(samples)
    peak = np.abs(samples).max()
    if peak <= 0:
        return samples[:0]
    n_frames = samples.size // frame
    kept = []
    for i in range(n_frames):
        chunk = samples[i * frame : (i + 1) * frame]
        if np.sqrt((chunk.astype(np.float64) ** 2).mean()) >= rms_fraction * peak:
            kept.append(chunk)
    return np.concatenate(kept) if kept else samples[:0]


def chunk_and_trim(samples, chunk_s=3.0, for_enrolment=False, rng=None):
    """Training audio -> consecutive chunks (tail dropped). Enrolment ->
    silence-trim then one random chunk window; too-short input is skipped
    (empty list) with a warning."""
    samples = np.asarray(samples)
    n_chunk = int(chunk_s * SAMPLE_RATE)
    if not for_enrolment:
        n = samples.size // n_chunk
        return [samples[i * n_chunk : (i + 1) * n_chunk] for i in range(n)]
    active = trim_silence(samples)
    if active.size < n_chunk:
        log.warning("enrolment clip too short after silence trim (%d samples); skipping", active.size)
        return []
    rng = rng if rng is not None else np.random.default_rng(0)
    start = int(rng.integers(0, active.size - n_chunk + 1))
    return [active[start : start + n_chunk]]


# ---------------------------------------------------------------------------
# dataset construction


@dataclass
class ManifestRecord:
    corrupted: str
    clean: str
    enrolments: list
    speaker_id: int
    snr_db: float
    noise_kind: str
    chunk_index: int = 0

    def to_line(self):
        return "\t".join(
            [
                self.corrupted,
                self.clean,
                ";".join(self.enrolments),
                str(self.speaker_id),
                f"{self.snr_db:.6f}",
                self.noise_kind,
                str(self.chunk_index),
            ]
        )

    @classmethod
    def from_line(cls, line):
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 7:
            raise MixerError(f"malformed manifest line: {line!r}")
        return cls(
            corrupted=parts[0],
            clean=parts[1],
            enrolments=parts[2].split(";"),
            speaker_id=int(parts[3]),
            snr_db=float(parts[4]),
            noise_kind=parts[5],
            chunk_index=int(parts[6]),
        )


def write_manifest(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_line() + "\n")


def read_manifest(path):
    with open(path) as f:
        return [ManifestRecord.from_line(line) for line in f if line.strip()]


ENROL_POOL_SIZE = 5
_ENROL_STREAM = 7  # rng substream tag for enrolment clips
_CLEAN_BASE = 100_000  # clean-source utterance indices, disjoint from enrolment pool
_BABBLE_BASE = 200_000


def _enrolment_clip(spk, idx, chunk_s):
    rng = np.random.default_rng(np.random.SeedSequence([spk.seed, _ENROL_STREAM, idx]))
    raw = synth_utterance(spk, ENROL_POOL_SIZE * _ENROL_STREAM + idx, chunk_s + 1.5)
    clips = chunk_and_trim(raw, chunk_s, for_enrolment=True, rng=rng)
    if not clips:
        # synthetic utterances are mostly voiced; pad from the raw signal
        return raw[: int(chunk_s * SAMPLE_RATE)]
    return clips[0]


def build_dataset(
    speakers,
    size,
    out_dir,
    seed=0,
    composition=(0.45, 0.45, 0.10),
    snr_range=(-3.0, 10.0),
    chunk_s=3.0,
    max_enrolments=ENROL_POOL_SIZE,
):
    """Generate `size` mixture examples and a manifest. Composition quotas
    are exact (then shuffled) so ratios hold for any size."""
    if len(speakers) < 2:
        raise MixerError("need at least 2 speakers (babble requires an interferer)")
    out_dir = Path(out_dir)
    for sub in ("corrupted", "clean", "enrol"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    n_amb = round(size * composition[0])
    n_bab = round(size * composition[1])
    kinds = ["ambient"] * n_amb + ["babble"] * n_bab + ["clean"] * (size - n_amb - n_bab)
    np.random.default_rng(seed).shuffle(kinds)

    n_chunk = int(chunk_s * SAMPLE_RATE)
    enrol_paths = {}  # (speaker_id, idx) -> path
    records = []
    for i, kind in enumerate(kinds):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        spk = speakers[int(rng.integers(len(speakers)))]
        clean = synth_utterance(spk, _CLEAN_BASE + i, chunk_s + 0.5)[:n_chunk]

        if kind == "ambient":
            noise = ambient_noise(rng, n_chunk)
            snr = float(rng.uniform(*snr_range))
        elif kind == "babble":
            others = [s for s in speakers if s.speaker_id != spk.speaker_id]
            interferer = others[int(rng.integers(len(others)))]
            noise = fit_length(synth_utterance(interferer, _BABBLE_BASE + i, chunk_s + 0.5), n_chunk)
            snr = float(rng.uniform(*snr_range))
        else:
            noise = rng.standard_normal(n_chunk).astype(np.float32)
            snr = float(rng.uniform(*CLEAN_KIND_SNR))

        corrupted = mix_at_snr(clean, noise, snr)
        # keep samples in [-1, 1] without touching the SNR: common rescale
        peak = max(np.abs(corrupted).max(), np.abs(clean).max())
        if peak > 1.0:
            corrupted = corrupted / peak
            clean = clean / peak

        q = int(rng.integers(1, max_enrolments + 1))
        idxs = rng.choice(ENROL_POOL_SIZE, size=q, replace=False)
        enrols = []
        for idx in idxs:
            key = (spk.speaker_id, int(idx))
            if key not in enrol_paths:
                path = out_dir / "enrol" / f"spk{spk.speaker_id:03d}_{idx}.wav"
                write_wav(path, _enrolment_clip(spk, int(idx), chunk_s))
                enrol_paths[key] = str(path)
            enrols.append(enrol_paths[key])

        cpath = out_dir / "corrupted" / f"ex{i:06d}.wav"
        kpath = out_dir / "clean" / f"ex{i:06d}.wav"
        write_wav(cpath, corrupted)
        write_wav(kpath, clean)
        records.append(
            ManifestRecord(
                corrupted=str(cpath),
                clean=str(kpath),
                enrolments=enrols,
                speaker_id=spk.speaker_id,
                snr_db=snr,
                noise_kind=kind,
            )
        )

    manifest = out_dir / "manifest.tsv"
    write_manifest(manifest, records)
    return manifest
