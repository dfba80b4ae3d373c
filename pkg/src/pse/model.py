"""Full enhancement network: encoder stack, one of two decoder variants
(static-profile concatenation or cross-attention over enrolment states),
sigmoid mask head, parameter counting and checkpointing.

Residual arrangement is post-LN throughout: LN(x + Dropout(SubLayer(x))).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from . import dsp
from .attention import AttentionConfig, EncoderBlock, FeedForward, LayerNorm, Linear, MultiHeadAttention
from .autograd import Tensor
from .profile import EmbedderConfig, SpeakerEmbedder


class ModelError(Exception):
    pass


VARIANTS = ("concat", "cross")
POOLINGS = ("mean", "last")


@dataclass
class PseModelConfig:
    n_enc_layers: int = 3
    n_dec_layers: int = 3
    variant: str = "concat"
    pooling: str = "mean"
    causal: bool = True
    d_fft: int = dsp.D_FFT
    d_model: int = 256
    d_embed: int = 256
    ffn_hidden: int = 1024
    dropout: float = 0.1
    n_heads: int = 8
    head_dim: int = 32
    look_back: int = 100
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)

    def __post_init__(self):
        if isinstance(self.embedder, dict):
            self.embedder = EmbedderConfig(**self.embedder)
        if self.variant not in VARIANTS:
            raise ModelError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.pooling not in POOLINGS:
            raise ModelError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.n_enc_layers < 1 or self.n_dec_layers < 1:
            raise ModelError("layer counts must be >= 1")
        if self.d_model != self.n_heads * self.head_dim:
            raise ModelError(
                f"d_model ({self.d_model}) != n_heads*head_dim ({self.n_heads}x{self.head_dim})"
            )
        if self.d_embed != self.embedder.d_embed:
            raise ModelError(
                f"d_embed ({self.d_embed}) != embedder output dim ({self.embedder.d_embed})"
            )

    def attention_cfg(self):
        return AttentionConfig(self.n_heads, self.head_dim, self.look_back, self.causal)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def base_config(variant="concat", **kw):
    return PseModelConfig(n_enc_layers=3, n_dec_layers=3, variant=variant, **kw)


def large_config(variant="concat", **kw):
    return PseModelConfig(n_enc_layers=6, n_dec_layers=6, variant=variant, **kw)


class ConcatDecoderLayer:
    """Static-profile layer: project Concat(Y, h_F) back to model width,
    then windowed self-attention and FFN, residual + post-LN each."""

    def __init__(self, cfg: PseModelConfig, rng, dtype=np.float32):
        d = cfg.d_model
        self.lt = Linear(d + cfg.d_embed, d, rng, dtype)
        self.mha = MultiHeadAttention(cfg.attention_cfg(), rng, dtype)
        self.ffn = FeedForward(d, cfg.ffn_hidden, rng, dtype)
        self.ln1 = LayerNorm(d, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.dropout = cfg.dropout

    def forward(self, y, h_f, train=False, rng=None):
        """y: (B, t, d_model), h_f: (B, d_embed)."""
        hf_rows = ag.expand_rows(h_f, y.shape[1])
        y1 = ag.dropout(self.lt(ag.concat([y, hf_rows], axis=-1)), self.dropout, rng, train)
        y2 = self.ln1(ag.add(y1, ag.dropout(self.mha.forward_self(y1), self.dropout, rng, train)))
        return self.ln2(ag.add(y2, ag.dropout(self.ffn(y2), self.dropout, rng, train)))

    def step(self, y_row, h_f, cache):
        y1 = self.lt.apply_np(np.concatenate([y_row, h_f]))
        y2 = self.ln1.apply_np(y1 + self.mha.step_self(y1, cache))
        return self.ln2.apply_np(y2 + self.ffn.apply_np(y2))

    def params(self, prefix):
        yield from self.lt.params(f"{prefix}.lt")
        yield from self.mha.params(f"{prefix}.mha")
        yield from self.ffn.params(f"{prefix}.ffn")
        yield from self.ln1.params(f"{prefix}.ln1")
        yield from self.ln2.params(f"{prefix}.ln2")


class CrossDecoderLayer:
    """Adaptive-profile layer: windowed self-attention, then unmasked
    cross-attention over the projected enrolment rows, then FFN."""

    def __init__(self, cfg: PseModelConfig, rng, dtype=np.float32):
        d = cfg.d_model
        self.self_mha = MultiHeadAttention(cfg.attention_cfg(), rng, dtype)
        self.cross_mha = MultiHeadAttention(cfg.attention_cfg(), rng, dtype, with_rpe=False)
        self.ffn = FeedForward(d, cfg.ffn_hidden, rng, dtype)
        self.ln1 = LayerNorm(d, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.ln3 = LayerNorm(d, dtype)
        self.dropout = cfg.dropout

    def forward(self, y, h_proj, train=False, rng=None):
        """y: (B, t, d_model), h_proj: (B, p, d_model)."""
        dp = self.dropout
        y1 = self.ln1(ag.add(y, ag.dropout(self.self_mha.forward_self(y), dp, rng, train)))
        y2 = self.ln2(
            ag.add(y1, ag.dropout(self.cross_mha.forward_cross(y1, h_proj), dp, rng, train))
        )
        return self.ln3(ag.add(y2, ag.dropout(self.ffn(y2), dp, rng, train)))

    def step(self, y_row, keys, vals, cache):
        y1 = self.ln1.apply_np(y_row + self.self_mha.step_self(y_row, cache))
        y2 = self.ln2.apply_np(y1 + self.cross_mha.cross_step(y1, keys, vals))
        return self.ln3.apply_np(y2 + self.ffn.apply_np(y2))

    def params(self, prefix):
        yield from self.self_mha.params(f"{prefix}.self_mha")
        yield from self.cross_mha.params(f"{prefix}.cross_mha")
        yield from self.ffn.params(f"{prefix}.ffn")
        yield from self.ln1.params(f"{prefix}.ln1")
        yield from self.ln2.params(f"{prefix}.ln2")
        yield from self.ln3.params(f"{prefix}.ln3")


class PseModel:
    def __init__(self, cfg: PseModelConfig, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.input_linear = Linear(cfg.d_fft, cfg.d_model, rng, self.dtype)
        self.enc_layers = [
            EncoderBlock(cfg.attention_cfg(), cfg.ffn_hidden, rng, self.dtype, cfg.dropout)
            for _ in range(cfg.n_enc_layers)
        ]
        if cfg.variant == "concat":
            self.profile_proj = None
            self.dec_layers = [
                ConcatDecoderLayer(cfg, rng, self.dtype) for _ in range(cfg.n_dec_layers)
            ]
        else:
            self.profile_proj = Linear(cfg.d_embed, cfg.d_model, rng, self.dtype)
            self.dec_layers = [
                CrossDecoderLayer(cfg, rng, self.dtype) for _ in range(cfg.n_dec_layers)
            ]
        self.out_linear = Linear(cfg.d_model, cfg.d_fft, rng, self.dtype)
        self.embedder = SpeakerEmbedder(cfg.embedder, rng, self.dtype)

    # -- parameters ----------------------------------------------------------

    def named_params(self, include_embedder=True):
        out = list(self.input_linear.params("input_linear"))
        for i, layer in enumerate(self.enc_layers):
            out.extend(layer.params(f"enc{i}"))
        if self.profile_proj is not None:
            out.extend(self.profile_proj.params("profile_proj"))
        for i, layer in enumerate(self.dec_layers):
            out.extend(layer.params(f"dec{i}"))
        out.extend(self.out_linear.params("out_linear"))
        if include_embedder:
            out.extend(self.embedder.params("embedder"))
        return out

    def count_params(self, include_embedder=False):
        return sum(p.data.size for _, p in self.named_params(include_embedder))

    # -- tape path -----------------------------------------------------------

    def encode(self, x, train=False, rng=None):
        """x: (B, t, d_fft) magnitudes -> (B, t, d_model) hidden states."""
        z = self.input_linear(x)
        for layer in self.enc_layers:
            z = layer.forward(z, train, rng)
        return z

    def decode_concat(self, z, h_f, train=False, rng=None):
        if h_f.shape[-1] != self.cfg.d_embed:
            raise ModelError(f"h_F must have length {self.cfg.d_embed}, got {h_f.shape[-1]}")
        y = z
        for layer in self.dec_layers:
            y = layer.forward(y, h_f, train, rng)
        return y

    def decode_cross(self, z, h_proj, train=False, rng=None):
        y = z
        for layer in self.dec_layers:
            y = layer.forward(y, h_proj, train, rng)
        return y

    def mask_logits(self, y):
        return self.out_linear(y)

    def forward_mask(self, x, h_f=None, h_states=None, h_proj=None, train=False, rng=None):
        """x: (B, t, d_fft) corrupted magnitudes -> (B, t, d_fft) mask in (0,1).

        concat variant: pass h_f (B, d_embed).
        cross variant: pass h_states (B, p, d_embed) to project on-tape, or an
        already-projected h_proj (B, p, d_model).
        """
        z = self.encode(x, train, rng)
        if self.cfg.variant == "concat":
            if h_f is None:
                raise ModelError("concat variant needs h_f")
            y = self.decode_concat(z, h_f, train, rng)
        else:
            if h_proj is None:
                if h_states is None:
                    raise ModelError("cross variant needs h_states or h_proj")
                h_proj = self.profile_proj(h_states)
            y = self.decode_cross(z, h_proj, train, rng)
        return ag.sigmoid(self.mask_logits(y))

    # -- inference -----------------------------------------------------------

    def _profile_kwargs(self, cache):
        if self.cfg.variant != cache.variant:
            raise ModelError(f"model variant {self.cfg.variant!r} != cache {cache.variant!r}")
        if self.cfg.variant == "concat":
            return {"h_f": Tensor(cache.h_f[None].astype(self.dtype))}
        return {"h_proj": Tensor(cache.h_proj[None].astype(self.dtype))}

    def mask_head(self, y, spec):
        """Decoder states -> masked spectrogram (noisy phase retained)."""
        mask = ag.sigmoid(self.mask_logits(y))
        return dsp.apply_mask(spec, mask.data[0] if mask.ndim == 3 else mask.data)

    def enhance_spectrogram(self, spec, cache):
        x = Tensor(spec.mag[None].astype(self.dtype))
        mask = self.forward_mask(x, **self._profile_kwargs(cache))
        return dsp.apply_mask(spec, mask.data[0])

    def enhance(self, samples, cache):
        """Offline enhancement; output trimmed to n_frames * hop samples so
        it aligns with the streaming emission policy."""
        spec = dsp.stft(np.asarray(samples))
        out = dsp.istft(self.enhance_spectrogram(spec, cache))
        return out[: spec.n_frames * spec.hop]

    # -- streaming step ------------------------------------------------------

    def new_caches(self):
        enc = [layer.mha.new_cache() for layer in self.enc_layers]
        if self.cfg.variant == "concat":
            dec = [layer.mha.new_cache() for layer in self.dec_layers]
        else:
            dec = [layer.self_mha.new_cache() for layer in self.dec_layers]
        return enc, dec

    def step_frame(self, mag_row, enc_caches, dec_caches, cache):
        """One spectrogram frame through the whole network; returns the mask
        row. Enrolment tensors come exclusively from the profile cache."""
        x = self.input_linear.apply_np(mag_row.astype(self.dtype))
        for layer, c in zip(self.enc_layers, enc_caches):
            x = layer.step(x, c)
        if self.cfg.variant == "concat":
            h_f = cache.h_f.astype(self.dtype)
            for layer, c in zip(self.dec_layers, dec_caches):
                x = layer.step(x, h_f, c)
        else:
            for layer, c, (keys, vals) in zip(self.dec_layers, dec_caches, cache.layer_kv):
                x = layer.step(x, keys, vals, c)
        logits = self.out_linear.apply_np(x)
        return 1.0 / (1.0 + np.exp(-logits))

    # -- checkpointing ---------------------------------------------------------

    def save_checkpoint(self, path, extra=None):
        header = {
            "section": "MODEL",
            "config": self.cfg.to_dict(),
            "dtype": self.dtype.name,
        }
        if extra:
            header["extra"] = extra
        ckpt.write_container(path, header, {n: p.data for n, p in self.named_params()})

    @classmethod
    def load_checkpoint(cls, path, expect_cfg=None):
        header, arrays = ckpt.read_container(path)
        if header.get("section") != "MODEL":
            raise ckpt.CheckpointError(f"not a model checkpoint: {header.get('section')!r}")
        cfg = PseModelConfig.from_dict(header["config"])
        if expect_cfg is not None and expect_cfg.to_dict() != cfg.to_dict():
            raise ckpt.CheckpointError("checkpoint config does not match the expected config")
        model = cls(cfg, seed=0, dtype=np.dtype(header["dtype"]))
        for name, p in model.named_params():
            if name not in arrays:
                raise ckpt.CheckpointError(f"missing parameter {name} in checkpoint")
            arr = arrays[name]
            if arr.shape != p.data.shape:
                raise ckpt.CheckpointError(f"shape mismatch for {name}")
            p.data = np.ascontiguousarray(arr.astype(model.dtype, copy=False))
        return model, header.get("extra")


def count_params(cfg, include_embedder=False):
    """Exact trainable-parameter total for a config (PSE network alone by
    default; the embedder is reported separately)."""
    return PseModel(cfg, seed=0).count_params(include_embedder)
