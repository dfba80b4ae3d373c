"""Speaker profiles: enrolment embedding, pooling, multi-utterance
aggregation and the precomputed per-speaker inference cache.

The embedder is a compact causal transformer over log-mel features,
trained jointly with the enhancement loss (a freeze flag lives in the
training config). A single enrolment utterance yields per-frame profile
rows; multiple utterances yield one pooled row per utterance.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from . import dsp
from .attention import AttentionConfig, EncoderBlock, Linear
from .autograd import Tensor


class ProfileError(Exception):
    pass


@dataclass
class EmbedderConfig:
    n_mels: int = 40
    n_layers: int = 1
    n_heads: int = 8
    head_dim: int = 32
    ffn_hidden: int = 512
    look_back: int = 100
    dropout: float = 0.1

    @property
    def d_embed(self):
        return self.n_heads * self.head_dim


class SpeakerEmbedder:
    """Causal encoder mapping log-mel frames to per-frame hidden states."""

    def __init__(self, cfg: EmbedderConfig, rng, dtype=np.float32):
        self.cfg = cfg
        acfg = AttentionConfig(cfg.n_heads, cfg.head_dim, cfg.look_back, causal=True)
        self.input_linear = Linear(cfg.n_mels, cfg.d_embed, rng, dtype)
        self.blocks = [
            EncoderBlock(acfg, cfg.ffn_hidden, rng, dtype, cfg.dropout)
            for _ in range(cfg.n_layers)
        ]
        self.calls = 0  # probe: counts full-utterance embeddings

    def forward_features(self, feats, train=False, rng=None):
        """feats: Tensor (B, t, n_mels) -> hidden states (B, t, d_embed)."""
        x = self.input_linear(feats)
        for block in self.blocks:
            x = block.forward(x, train, rng)
        return x

    def embed_utterance(self, samples):
        """Waveform -> (t_e, d_embed) hidden states (inference path)."""
        self.calls += 1
        feats = dsp.log_mel(samples, n_mels=self.cfg.n_mels)
        dtype = self.input_linear.w.dtype
        h = self.forward_features(Tensor(feats[None].astype(dtype)))
        return h.data[0]

    def params(self, prefix="embedder"):
        yield from self.input_linear.params(f"{prefix}.input_linear")
        for i, block in enumerate(self.blocks):
            yield from block.params(f"{prefix}.block{i}")


# ---------------------------------------------------------------------------
# pooling / aggregation


def pool(h_states, mode):
    """(t_e, d) -> (d,): arithmetic mean of rows, or the final row."""
    h_states = np.asarray(h_states)
    if h_states.shape[0] < 1:
        raise ProfileError("cannot pool an empty state sequence")
    if mode == "mean":
        return h_states.mean(axis=0)
    if mode == "last":
        return h_states[-1]
    raise ProfileError(f"unknown pooling mode {mode!r}")


def pool_tensor(h, mode):
    """Tape-path pooling over axis 1: (B, t, d) -> (B, d)."""
    if mode == "mean":
        return ag.tmean(h, axis=1)
    if mode == "last":
        return ag.select(h, 1, h.shape[1] - 1)
    raise ProfileError(f"unknown pooling mode {mode!r}")


@dataclass
class ProfileStates:
    """Enrolment rows the cross-attention attends over: per-frame hidden
    states of a single utterance, or one pooled row per utterance."""

    mode: str  # "frames" | "utterances"
    rows: np.ndarray  # (p, d_embed)

    def __post_init__(self):
        if self.mode not in ("frames", "utterances"):
            raise ProfileError(f"unknown profile mode {self.mode!r}")
        if self.rows.shape[0] < 1:
            raise ProfileError("profile needs at least one row")


def aggregate_multi(embedder, utterances, pooling="mean"):
    """Pool each enrolment utterance, stack into H_F and average into h_F."""
    if len(utterances) < 1:
        raise ProfileError("need at least one enrolment utterance")
    pooled = [pool(embedder.embed_utterance(u), pooling) for u in utterances]
    h_stack = np.stack(pooled)
    return h_stack, h_stack.mean(axis=0)


def build_profile_states(embedder, utterances, pooling="mean", profile_mode="auto"):
    """Returns (ProfileStates, h_F). Single utterance -> per-frame rows,
    multiple utterances -> per-utterance rows (override via profile_mode)."""
    if len(utterances) < 1:
        raise ProfileError("need at least one enrolment utterance")
    if profile_mode == "auto":
        profile_mode = "frames" if len(utterances) == 1 else "utterances"
    if profile_mode == "frames":
        if len(utterances) != 1:
            raise ProfileError("per-frame profile mode requires a single utterance")
        h = embedder.embed_utterance(utterances[0])
        return ProfileStates("frames", h), pool(h, pooling)
    h_stack, h_f = aggregate_multi(embedder, utterances, pooling)
    return ProfileStates("utterances", h_stack), h_f


def project_profile(h_f_rows, projection):
    """Row-wise linear map of profile rows into model dimension."""
    return projection.apply_np(np.asarray(h_f_rows))


# ---------------------------------------------------------------------------
# per-speaker inference cache


@dataclass
class ProfileCache:
    """Everything enrolment-side, computed once per speaker: profile rows,
    the static pooled vector, the projected rows H' and their per-decoder-
    layer K/V projections. Streaming never touches enrolment audio again."""

    variant: str
    pooling: str
    states: ProfileStates
    h_f: np.ndarray  # (d_embed,)
    h_proj: np.ndarray | None = None  # (p, d_model), cross only
    layer_kv: list | None = None  # [(K, V)] per decoder layer, cross only

    @property
    def p(self):
        return self.states.rows.shape[0]

    def save(self, path):
        header = {
            "section": "PROFILE",
            "variant": self.variant,
            "pooling": self.pooling,
            "mode": self.states.mode,
            "n_layers": 0 if self.layer_kv is None else len(self.layer_kv),
        }
        arrays = {"states": self.states.rows, "h_f": self.h_f}
        if self.h_proj is not None:
            arrays["h_proj"] = self.h_proj
        if self.layer_kv is not None:
            for i, (k, v) in enumerate(self.layer_kv):
                arrays[f"kv.{i}.k"] = k
                arrays[f"kv.{i}.v"] = v
        ckpt.write_container(path, header, arrays)

    @classmethod
    def load(cls, path):
        header, arrays = ckpt.read_container(path)
        if header.get("section") != "PROFILE":
            raise ProfileError(f"not a profile cache: section={header.get('section')!r}")
        n_layers = header["n_layers"]
        layer_kv = None
        if n_layers:
            layer_kv = [(arrays[f"kv.{i}.k"], arrays[f"kv.{i}.v"]) for i in range(n_layers)]
        return cls(
            variant=header["variant"],
            pooling=header["pooling"],
            states=ProfileStates(header["mode"], arrays["states"]),
            h_f=arrays["h_f"],
            h_proj=arrays.get("h_proj"),
            layer_kv=layer_kv,
        )


def precompute_cache(model, utterances, pooling=None, profile_mode="auto"):
    """Build the full enrolment-side cache for one speaker against a model.

    For the cross variant this includes H' and the K/V projections for
    every decoder layer, so streaming sessions only do lookups.
    """
    pooling = pooling if pooling is not None else model.cfg.pooling
    states, h_f = build_profile_states(model.embedder, utterances, pooling, profile_mode)
    cache = ProfileCache(
        variant=model.cfg.variant, pooling=pooling, states=states, h_f=h_f
    )
    if model.cfg.variant == "cross":
        cache.h_proj = project_profile(states.rows, model.profile_proj)
        cache.layer_kv = [
            layer.cross_mha.project_kv_np(cache.h_proj) for layer in model.dec_layers
        ]
    return cache
