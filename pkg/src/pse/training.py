"""Loss, optimizer schedule and training loop for both decoder variants.

Objective: mean squared distance between power-law compressed magnitudes
of the masked output and the clean reference. Optimizer: Adam with the
inverse-sqrt warm-up schedule scaled by d_model, global-norm gradient
clipping at 5.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from . import dsp
from .autograd import Tape, Tensor
from .mixer import read_manifest, read_wav
from .profile import pool_tensor

log = logging.getLogger(__name__)


class TrainingError(Exception):
    pass


@dataclass
class TrainConfig:
    warmup_steps: int = 1000
    batch_size: int = 8
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    loss_c: float = 0.3
    lr_scale: float = 1.0
    clip_norm: float = 5.0
    freeze_embedder: bool = False
    val_fraction: float = 0.1
    val_every: int = 100
    val_max_examples: int = 32

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise TrainingError("warmup_steps must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")


@dataclass
class LossReport:
    step: int
    split: str
    loss: float
    lr: float

    def to_line(self):
        return f"{self.step}\t{self.split}\t{self.loss:.6e}\t{self.lr:.6e}"


def spectral_loss(x_hat, x_ref, c=0.3):
    """Mean squared difference of c-compressed magnitudes (tape op).
    x_hat: Tensor, x_ref: Tensor or ndarray of the same shape."""
    if not isinstance(x_ref, Tensor):
        x_ref = Tensor(np.asarray(x_ref))
    if x_hat.shape != x_ref.shape:
        raise TrainingError(f"shape mismatch: {x_hat.shape} vs {x_ref.shape}")
    diff = ag.sub(ag.power_compress(x_hat, c), ag.power_compress(x_ref, c))
    return ag.tmean(ag.mul(diff, diff))


def lr_at_step(step, d_model=256, warmup=16000):
    """Inverse-sqrt schedule: d_model^-0.5 * min(step^-0.5, step*warmup^-1.5)."""
    if step < 1:
        raise TrainingError("schedule is defined for step >= 1")
    return d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


class Adam:
    def __init__(self, named_params, beta1=0.9, beta2=0.98, eps=1e-9, clip_norm=5.0):
        self.named_params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named_params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named_params}

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def step(self, lr):
        self.t += 1
        grads = {n: p.grad for n, p in self.named_params if p.grad is not None}
        if self.clip_norm and grads:
            total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = {n: g * scale for n, g in grads.items()}
        b1, b2 = self.beta1, self.beta2
        for n, p in self.named_params:
            g = grads.get(n)
            if g is None:
                continue
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            mhat = self.m[n] / (1 - b1**self.t)
            vhat = self.v[n] / (1 - b2**self.t)
            p.data = p.data - (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def state_arrays(self):
        out = {"t": np.array([self.t], dtype=np.int64)}
        for n in self.m:
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["t"][0])
        for n in self.m:
            self.m[n] = arrays[f"m.{n}"].astype(self.m[n].dtype)
            self.v[n] = arrays[f"v.{n}"].astype(self.v[n].dtype)


# ---------------------------------------------------------------------------
# batch assembly


@dataclass
class Batch:
    corrupt_mag: np.ndarray  # (B, t, d_fft)
    clean_mag: np.ndarray  # (B, t, d_fft)
    enrol_feats: np.ndarray  # (B, t_e, n_mels)


def load_batch(records, n_mels):
    """Read waveforms and build aligned feature arrays; frame counts are
    cropped to the batch minimum (uniform for fixed-length chunks)."""
    xs, ys, es = [], [], []
    for r in records:
        xs.append(dsp.stft(read_wav(r.corrupted)).mag)
        ys.append(dsp.stft(read_wav(r.clean)).mag)
        es.append(dsp.log_mel(read_wav(r.enrolments[0]), n_mels=n_mels))
    t = min(a.shape[0] for a in xs + ys)
    te = min(a.shape[0] for a in es)
    return Batch(
        corrupt_mag=np.stack([a[:t] for a in xs]),
        clean_mag=np.stack([a[:t] for a in ys]),
        enrol_feats=np.stack([a[:te] for a in es]),
    )


def batch_loss(model, batch, tcfg, train=False, rng=None):
    """Forward pass to scalar loss (call inside a Tape for gradients)."""
    dtype = model.dtype
    x = Tensor(batch.corrupt_mag.astype(dtype))
    feats = batch.enrol_feats.astype(dtype)
    if tcfg.freeze_embedder and train:
        h = Tensor(model.embedder.forward_features(Tensor(feats)).data)
    else:
        h = model.embedder.forward_features(Tensor(feats), train=train, rng=rng)
    if model.cfg.variant == "concat":
        mask = model.forward_mask(x, h_f=pool_tensor(h, model.cfg.pooling), train=train, rng=rng)
    else:
        mask = model.forward_mask(x, h_states=h, train=train, rng=rng)
    return spectral_loss(ag.mul(mask, x), batch.clean_mag.astype(dtype), tcfg.loss_c)


def train_step(model, batch, opt, tcfg, step, rng):
    """One Adam update at the scheduled learning rate; returns a LossReport."""
    opt.zero_grad()
    with Tape() as tape:
        loss = batch_loss(model, batch, tcfg, train=True, rng=rng)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {step}")
    tape.backward(loss)
    lr = lr_at_step(step, model.cfg.d_model, tcfg.warmup_steps) * tcfg.lr_scale
    opt.step(lr)
    return LossReport(step=step, split="train", loss=value, lr=lr)


def validation_loss(model, records, tcfg):
    """Dropout-off loss over a capped validation subset."""
    total, count = 0.0, 0
    bs = tcfg.batch_size
    records = records[: tcfg.val_max_examples]
    for i in range(0, len(records), bs):
        batch = load_batch(records[i : i + bs], model.cfg.embedder.n_mels)
        total += batch_loss(model, batch, tcfg, train=False).item() * len(records[i : i + bs])
        count += len(records[i : i + bs])
    return total / max(count, 1)


def trainable_params(model, tcfg):
    return model.named_params(include_embedder=not tcfg.freeze_embedder)


def train_loop(manifest_path, model, tcfg, out_dir, resume_from=None):
    """Train `model` on a mixture manifest. Writes line-delimited loss
    reports, a last checkpoint every validation and the best-validation
    checkpoint; returns (best_checkpoint_path, reports)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = read_manifest(manifest_path)
    if not records:
        raise TrainingError("empty manifest")

    split_rng = np.random.default_rng(tcfg.seed)
    order = split_rng.permutation(len(records))
    n_val = max(1, int(len(records) * tcfg.val_fraction))
    val_records = [records[i] for i in order[:n_val]]
    train_records = [records[i] for i in order[n_val:]]
    if not train_records:
        raise TrainingError("no training examples left after validation split")

    opt = Adam(trainable_params(model, tcfg), clip_norm=tcfg.clip_norm)
    step = 0
    if resume_from is not None:
        opt_path = Path(str(resume_from) + ".opt")
        if opt_path.exists():
            header, arrays = ckpt.read_container(opt_path)
            opt.load_state_arrays(arrays)
            step = int(header.get("step", opt.t))

    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 1]))
    log_path = out_dir / "train_log.txt"
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    best_val = np.inf
    reports = []

    def checkpoint(path):
        model.save_checkpoint(path, extra={"step": step})
        ckpt.write_container(str(path) + ".opt", {"section": "OPT", "step": step}, opt.state_arrays())

    def validate():
        nonlocal best_val
        vloss = validation_loss(model, val_records, tcfg)
        rep = LossReport(step=step, split="val", loss=vloss, lr=0.0)
        reports.append(rep)
        logf.write(rep.to_line() + "\n")
        logf.flush()
        checkpoint(last_path)
        if vloss < best_val:
            best_val = vloss
            checkpoint(best_path)

    with open(log_path, "a") as logf:
        done = False
        for epoch in range(tcfg.epochs):
            epoch_order = rng.permutation(len(train_records))
            for i in range(0, len(train_records) - tcfg.batch_size + 1, tcfg.batch_size):
                batch_records = [train_records[j] for j in epoch_order[i : i + tcfg.batch_size]]
                batch = load_batch(batch_records, model.cfg.embedder.n_mels)
                step += 1
                rep = train_step(model, batch, opt, tcfg, step, rng)
                reports.append(rep)
                logf.write(rep.to_line() + "\n")
                if step % tcfg.val_every == 0:
                    validate()
                if tcfg.max_steps is not None and step >= tcfg.max_steps:
                    done = True
                    break
            if done:
                break
        validate()
    return best_path, reports
