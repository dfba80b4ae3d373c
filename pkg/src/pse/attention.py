"""Multi-headed attention building blocks.

Self-attention is causal with a bounded look-back window and a learned
relative-position bias (per head, one scalar per clipped offset in
[0, k]). Cross-attention over enrolment states is unmasked and carries no
positional bias. A KVCache holds the last k+1 post-projection key/value
rows per layer so streaming steps reproduce the offline computation
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class AttentionError(Exception):
    pass


@dataclass
class AttentionConfig:
    n_heads: int = 8
    head_dim: int = 32
    look_back: int = 100
    causal: bool = True

    @property
    def d_model(self):
        return self.n_heads * self.head_dim

    def __post_init__(self):
        if self.look_back < 0:
            raise AttentionError("look_back must be >= 0")


def init_linear_weight(rng, d_in, d_out, dtype):
    bound = 1.0 / np.sqrt(d_in)
    return rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype)


class Linear:
    def __init__(self, d_in, d_out, rng, dtype=np.float32):
        self.w = Tensor(init_linear_weight(rng, d_in, d_out, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ag.add(ag.matmul(x, self.w), self.b)

    def apply_np(self, x):
        return x @ self.w.data + self.b.data

    def params(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class LayerNorm:
    def __init__(self, d, dtype=np.float32, eps=1e-5):
        self.gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return ag.layer_norm(x, self.gain, self.bias, self.eps)

    def apply_np(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return (xc / np.sqrt(var + self.eps)) * self.gain.data + self.bias.data

    def params(self, prefix):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


class FeedForward:
    """Position-wise FFN with one ReLU hidden layer."""

    def __init__(self, d_model, d_hidden, rng, dtype=np.float32):
        self.lin1 = Linear(d_model, d_hidden, rng, dtype)
        self.lin2 = Linear(d_hidden, d_model, rng, dtype)

    def __call__(self, x):
        return self.lin2(ag.relu(self.lin1(x)))

    def apply_np(self, x):
        return self.lin2.apply_np(np.maximum(self.lin1.apply_np(x), 0))

    def params(self, prefix):
        yield from self.lin1.params(f"{prefix}.lin1")
        yield from self.lin2.params(f"{prefix}.lin2")


class KVCache:
    """Ring buffer of the last <= k+1 post-projection K/V rows, kept in
    chronological order (oldest first)."""

    def __init__(self, n_heads, head_dim, look_back, dtype=np.float32):
        self.cap = look_back + 1
        self.k_rows = np.zeros((n_heads, self.cap, head_dim), dtype=dtype)
        self.v_rows = np.zeros((n_heads, self.cap, head_dim), dtype=dtype)
        self.count = 0
        self.frames_seen = 0

    def append(self, k_row, v_row):
        if self.count == self.cap:
            self.k_rows[:, :-1] = self.k_rows[:, 1:]
            self.v_rows[:, :-1] = self.v_rows[:, 1:]
            self.count -= 1
        self.k_rows[:, self.count] = k_row
        self.v_rows[:, self.count] = v_row
        self.count += 1
        self.frames_seen += 1

    def __len__(self):
        return self.count


def window_mask(t, look_back, causal=True):
    """(t, t) boolean mask; row i allows columns max(0, i-k)..i."""
    if not causal:
        return np.ones((t, t), dtype=bool)
    i = np.arange(t)[:, None]
    j = np.arange(t)[None, :]
    return (j <= i) & (j >= i - look_back)


def relative_offsets(t, look_back):
    """(t, t) int offsets i-j clipped into [0, k] for the bias table."""
    i = np.arange(t)[:, None]
    j = np.arange(t)[None, :]
    return np.clip(i - j, 0, look_back)


class MultiHeadAttention:
    """One MHA block: Q/K/V/output projections plus, for self-attention,
    the relative-position bias table."""

    def __init__(self, cfg: AttentionConfig, rng, dtype=np.float32, with_rpe=True):
        d = cfg.d_model
        self.cfg = cfg
        self.wq = Linear(d, d, rng, dtype)
        self.wk = Linear(d, d, rng, dtype)
        self.wv = Linear(d, d, rng, dtype)
        self.wo = Linear(d, d, rng, dtype)
        self.rpe = None
        if with_rpe:
            self.rpe = Tensor(
                np.zeros((cfg.n_heads, cfg.look_back + 1), dtype=dtype), requires_grad=True
            )
        self._scale = 1.0 / np.sqrt(cfg.head_dim)

    # -- tape path (training / offline) ------------------------------------

    def _split_heads(self, x):
        b, t, _ = x.shape
        h, dk = self.cfg.n_heads, self.cfg.head_dim
        return ag.transpose(ag.reshape(x, (b, t, h, dk)), (0, 2, 1, 3))

    def _merge_heads(self, x):
        b, h, t, dk = x.shape
        return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (b, t, h * dk))

    def forward_self(self, x):
        """Windowed causal self-attention with relative-position bias.
        x: (B, t, d_model)."""
        t = x.shape[1]
        q = self._split_heads(self.wq(x))
        k = self._split_heads(self.wk(x))
        v = self._split_heads(self.wv(x))
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), self._scale)
        if self.rpe is not None:
            scores = ag.add(scores, ag.take(self.rpe, relative_offsets(t, self.cfg.look_back)))
        mask = window_mask(t, self.cfg.look_back, self.cfg.causal)
        probs = ag.masked_softmax(scores, mask)
        return self.wo(self._merge_heads(ag.matmul(probs, v)))

    def forward_cross(self, q_in, kv):
        """Unmasked cross-attention; every query row attends over all kv
        rows. q_in: (B, t, d_model), kv: (B, p, d_model)."""
        if kv.shape[1] < 1:
            raise AttentionError("cross-attention needs at least one enrolment row")
        q = self._split_heads(self.wq(q_in))
        k = self._split_heads(self.wk(kv))
        v = self._split_heads(self.wv(kv))
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), self._scale)
        probs = ag.masked_softmax(scores)
        return self.wo(self._merge_heads(ag.matmul(probs, v)))

    # -- numpy path (streaming steps, cached kv) ----------------------------

    def _heads_np(self, rows):
        # (p, d_model) -> (heads, p, head_dim)
        p = rows.shape[0]
        return rows.reshape(p, self.cfg.n_heads, self.cfg.head_dim).transpose(1, 0, 2)

    def new_cache(self):
        return KVCache(
            self.cfg.n_heads, self.cfg.head_dim, self.cfg.look_back, self.wq.w.data.dtype
        )

    def step_self(self, x_row, cache):
        """Process one frame through self-attention using the cache.
        Equivalent to the row the offline pass would produce."""
        h, dk = self.cfg.n_heads, self.cfg.head_dim
        q = self.wq.apply_np(x_row).reshape(h, dk)
        k_new = self.wk.apply_np(x_row).reshape(h, dk)
        v_new = self.wv.apply_np(x_row).reshape(h, dk)
        cache.append(k_new, v_new)
        m = cache.count
        keys = cache.k_rows[:, :m]  # (h, m, dk), oldest first
        vals = cache.v_rows[:, :m]
        scores = np.einsum("hd,hmd->hm", q, keys) * self._scale
        if self.rpe is not None:
            offsets = np.arange(m - 1, -1, -1)  # current frame has offset 0
            scores = scores + self.rpe.data[:, offsets]
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(axis=-1, keepdims=True)
        ctx = np.einsum("hm,hmd->hd", probs, vals)
        return self.wo.apply_np(ctx.reshape(h * dk))

    def project_kv_np(self, kv_rows):
        """Precompute cross-attention K/V for enrolment rows (p, d_model)."""
        return self._heads_np(self.wk.apply_np(kv_rows)), self._heads_np(self.wv.apply_np(kv_rows))

    def cross_step(self, q_row, keys, vals):
        h, dk = self.cfg.n_heads, self.cfg.head_dim
        q = self.wq.apply_np(q_row).reshape(h, dk)
        scores = np.einsum("hd,hpd->hp", q, keys) * self._scale
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(axis=-1, keepdims=True)
        ctx = np.einsum("hp,hpd->hd", probs, vals)
        return self.wo.apply_np(ctx.reshape(h * dk))

    def params(self, prefix):
        yield from self.wq.params(f"{prefix}.wq")
        yield from self.wk.params(f"{prefix}.wk")
        yield from self.wv.params(f"{prefix}.wv")
        yield from self.wo.params(f"{prefix}.wo")
        if self.rpe is not None:
            yield f"{prefix}.rpe", self.rpe


class EncoderBlock:
    """Windowed self-attention + FFN, each with dropout, residual and
    post-LN. Shared by the PSE encoder stack and the speaker embedder."""

    def __init__(self, cfg: AttentionConfig, ffn_hidden, rng, dtype=np.float32, dropout=0.1):
        self.mha = MultiHeadAttention(cfg, rng, dtype)
        self.ffn = FeedForward(cfg.d_model, ffn_hidden, rng, dtype)
        self.ln1 = LayerNorm(cfg.d_model, dtype)
        self.ln2 = LayerNorm(cfg.d_model, dtype)
        self.dropout = dropout

    def forward(self, x, train=False, rng=None):
        a = self.ln1(ag.add(x, ag.dropout(self.mha.forward_self(x), self.dropout, rng, train)))
        return self.ln2(ag.add(a, ag.dropout(self.ffn(a), self.dropout, rng, train)))

    def step(self, x_row, cache):
        a = self.ln1.apply_np(x_row + self.mha.step_self(x_row, cache))
        return self.ln2.apply_np(a + self.ffn.apply_np(a))

    def params(self, prefix):
        yield from self.mha.params(f"{prefix}.mha")
        yield from self.ffn.params(f"{prefix}.ffn")
        yield from self.ln1.params(f"{prefix}.ln1")
        yield from self.ln2.params(f"{prefix}.ln2")
