"""Evaluation metrics: signal-to-distortion ratio, word error rate and
dataset-level reports.

SDR is the plain energy-ratio form, 10*log10(E_ref / E_err), capped at
+100 dB for perfect reconstruction. WER uses unit-cost Levenshtein
distance over whitespace tokens. Transcription is an external hook: a
configured command gets a WAV path and must print the hypothesis text.
"""

from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mixer import read_manifest, read_wav, write_wav
from .profile import precompute_cache

log = logging.getLogger(__name__)

SDR_CAP_DB = 100.0


class MetricsError(Exception):
    pass


def sdr(ref, est):
    """10*log10(sum(ref^2) / sum((ref-est)^2)) in dB, capped at +100."""
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise MetricsError(f"length mismatch: ref {ref.shape}, est {est.shape}")
    e_ref = float((ref**2).sum())
    if e_ref <= 0:
        raise MetricsError("reference has zero energy")
    e_err = float(((ref - est) ** 2).sum())
    if e_err <= 0:
        return SDR_CAP_DB
    return min(10.0 * np.log10(e_ref / e_err), SDR_CAP_DB)


def normalize_text(text):
    """Lowercase and strip punctuation, collapse whitespace."""
    kept = [c if c.isalnum() or c.isspace() else " " for c in text.lower()]
    return " ".join("".join(kept).split())


def wer(ref_text, hyp_text):
    """(substitutions + insertions + deletions) / reference word count."""
    ref = ref_text.split()
    hyp = hyp_text.split()
    if not ref:
        raise MetricsError("empty reference")
    # Levenshtein DP over words, unit costs
    prev = list(range(len(hyp) + 1))
    for i, rw in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, hw in enumerate(hyp, start=1):
            cur[j] = min(
                prev[j] + 1,  # deletion
                cur[j - 1] + 1,  # insertion
                prev[j - 1] + (rw != hw),  # substitution / match
            )
        prev = cur
    return prev[-1] / len(ref)


# ---------------------------------------------------------------------------
# dataset-level evaluation


@dataclass
class EvalRow:
    index: int
    noise_kind: str
    snr_db: float
    sdr_enhanced: float
    sdr_unprocessed: float
    wer_enhanced: float | None = None
    error: str | None = None

    def to_line(self):
        w = "" if self.wer_enhanced is None else f"{self.wer_enhanced:.4f}"
        e = self.error or ""
        return (
            f"{self.index}\t{self.noise_kind}\t{self.snr_db:.3f}\t"
            f"{self.sdr_enhanced:.4f}\t{self.sdr_unprocessed:.4f}\t{w}\t{e}"
        )


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    model_id: str = ""
    dataset_id: str = ""
    seed: int = 0

    def _kinds(self):
        return sorted({r.noise_kind for r in self.rows})

    def summary(self):
        out = {}
        groups = {"all": self.rows}
        for kind in self._kinds():
            groups[kind] = [r for r in self.rows if r.noise_kind == kind]
        for name, rows in groups.items():
            vals = np.array([r.sdr_enhanced for r in rows])
            base = np.array([r.sdr_unprocessed for r in rows])
            entry = {
                "count": len(rows),
                "sdr_mean": float(vals.mean()),
                "sdr_std": float(vals.std()),
                "sdr_unprocessed_mean": float(base.mean()),
                "sdr_improvement": float(vals.mean() - base.mean()),
            }
            wers = [r.wer_enhanced for r in rows if r.wer_enhanced is not None]
            if wers:
                entry["wer_mean"] = float(np.mean(wers))
            out[name] = entry
        return out

    def write(self, path):
        with open(path, "w") as f:
            f.write(f"# model={self.model_id} dataset={self.dataset_id} seed={self.seed}\n")
            f.write("# index\tkind\tsnr_db\tsdr_enh\tsdr_unproc\twer\terror\n")
            for r in self.rows:
                f.write(r.to_line() + "\n")
            f.write("# summary\n")
            for name, entry in self.summary().items():
                stats = " ".join(f"{k}={v}" for k, v in entry.items())
                f.write(f"# {name}: {stats}\n")


def _transcribe(cmd, wav_path):
    argv = shlex.split(cmd) + [str(wav_path)]
    proc = subprocess.run(argv, capture_output=True, text=True, timeout=600)
    if proc.returncode != 0:
        raise MetricsError(f"transcriber failed ({proc.returncode}): {proc.stderr.strip()}")
    return normalize_text(proc.stdout)


def evaluate(
    model,
    manifest_path,
    transcriber_cmd=None,
    enhanced_dir=None,
    limit=None,
    model_id="",
    seed=0,
):
    """Per-example SDR against the clean reference, split by noise kind.

    Enhancement runs offline through the model unless enhanced_dir holds
    pre-enhanced WAVs named like the corrupted files. WER (enhanced vs the
    transcription of the clean reference) is computed only when a
    transcriber command is configured; its failures are recorded per row.
    """
    records = read_manifest(manifest_path)
    if limit is not None:
        records = records[:limit]
    report = EvalReport(model_id=model_id, dataset_id=str(manifest_path), seed=seed)
    cache_by_key = {}
    for i, rec in enumerate(records):
        corrupted = read_wav(rec.corrupted)
        clean = read_wav(rec.clean)
        if enhanced_dir is not None:
            est = read_wav(Path(enhanced_dir) / Path(rec.corrupted).name)
        else:
            key = (rec.speaker_id, tuple(rec.enrolments))
            if key not in cache_by_key:
                cache_by_key[key] = precompute_cache(
                    model, [read_wav(p) for p in rec.enrolments]
                )
            est = model.enhance(corrupted, cache_by_key[key])
        n = min(len(est), len(clean))
        row = EvalRow(
            index=i,
            noise_kind=rec.noise_kind,
            snr_db=rec.snr_db,
            sdr_enhanced=sdr(clean[:n], est[:n]),
            sdr_unprocessed=sdr(clean[:n], corrupted[:n]),
        )
        if transcriber_cmd:
            try:
                with tempfile.TemporaryDirectory() as tmp:
                    est_path = Path(tmp) / "enhanced.wav"
                    write_wav(est_path, est)
                    ref_text = _transcribe(transcriber_cmd, rec.clean)
                    hyp_text = _transcribe(transcriber_cmd, est_path)
                row.wer_enhanced = wer(ref_text, hyp_text)
            except Exception as exc:  # noqa: BLE001 - recorded per example
                row.error = str(exc)
                log.warning("transcription failed for example %d: %s", i, exc)
        report.rows.append(row)
    return report
