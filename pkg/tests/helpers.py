"""Shared test oracles: finite-difference gradients and dense reference
implementations computed independently of the library code under test."""

import numpy as np

from pse.autograd import Tape, Tensor


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of a scalar-valued f at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def tape_grad(op, *arrays, eps=1e-6):
    """Analytic and numeric gradients of sum(op(*tensors)) w.r.t. each input.

    Returns a list of (analytic, numeric) pairs, all float64.
    """
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op(*tensors)
        from pse import autograd as ag

        loss = ag.tsum(out) if out.data.size != 1 else out
    tape.backward(loss)
    pairs = []
    for i, t in enumerate(tensors):
        def f(x, i=i):
            args = [np.asarray(a, dtype=np.float64) for a in arrays]
            args[i] = x
            return float(op(*[Tensor(a) for a in args]).data.sum())

        pairs.append((t.grad, numeric_grad(f, np.asarray(arrays[i], dtype=np.float64), eps)))
    return pairs


def assert_close_grads(pairs, rtol=1e-6, atol=1e-8):
    for analytic, numeric in pairs:
        assert analytic is not None
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)


def dense_self_attention(x, mha, look_back, causal=True):
    """Independent per-equation reference for windowed causal self-attention
    with a learned relative-position bias (float64, explicit loops)."""
    x = np.asarray(x, dtype=np.float64)
    b, t, d = x.shape
    h, dk = mha.cfg.n_heads, mha.cfg.head_dim
    wq, bq = mha.wq.w.data.astype(np.float64), mha.wq.b.data.astype(np.float64)
    wk, bk = mha.wk.w.data.astype(np.float64), mha.wk.b.data.astype(np.float64)
    wv, bv = mha.wv.w.data.astype(np.float64), mha.wv.b.data.astype(np.float64)
    wo, bo = mha.wo.w.data.astype(np.float64), mha.wo.b.data.astype(np.float64)
    rpe = None if mha.rpe is None else mha.rpe.data.astype(np.float64)
    out = np.zeros((b, t, d))
    for bi in range(b):
        q = x[bi] @ wq + bq
        k = x[bi] @ wk + bk
        v = x[bi] @ wv + bv
        ctx = np.zeros((t, d))
        for head in range(h):
            sl = slice(head * dk, (head + 1) * dk)
            for i in range(t):
                lo = max(0, i - look_back) if causal else 0
                hi = i + 1 if causal else t
                scores = []
                for j in range(lo, hi):
                    s = float(q[i, sl] @ k[j, sl]) / np.sqrt(dk)
                    if rpe is not None:
                        s += rpe[head, min(max(i - j, 0), look_back)]
                    scores.append(s)
                scores = np.array(scores)
                e = np.exp(scores - scores.max())
                p = e / e.sum()
                ctx[i, sl] = p @ v[lo:hi, sl]
        out[bi] = ctx @ wo + bo
    return out


def dense_cross_attention(q_in, kv, mha):
    """Independent reference for unmasked cross-attention (no positional
    bias), float64 with explicit loops."""
    q_in = np.asarray(q_in, dtype=np.float64)
    kv = np.asarray(kv, dtype=np.float64)
    b, t, d = q_in.shape
    p = kv.shape[1]
    h, dk = mha.cfg.n_heads, mha.cfg.head_dim
    wq, bq = mha.wq.w.data.astype(np.float64), mha.wq.b.data.astype(np.float64)
    wk, bk = mha.wk.w.data.astype(np.float64), mha.wk.b.data.astype(np.float64)
    wv, bv = mha.wv.w.data.astype(np.float64), mha.wv.b.data.astype(np.float64)
    wo, bo = mha.wo.w.data.astype(np.float64), mha.wo.b.data.astype(np.float64)
    out = np.zeros((b, t, d))
    for bi in range(b):
        q = q_in[bi] @ wq + bq
        k = kv[bi] @ wk + bk
        v = kv[bi] @ wv + bv
        ctx = np.zeros((t, d))
        for head in range(h):
            sl = slice(head * dk, (head + 1) * dk)
            for i in range(t):
                scores = np.array([float(q[i, sl] @ k[j, sl]) / np.sqrt(dk) for j in range(p)])
                e = np.exp(scores - scores.max())
                ctx[i, sl] = (e / e.sum()) @ v[:, sl]
        out[bi] = ctx @ wo + bo
    return out


def brute_force_edit_distance(ref, hyp):
    """Plain recursive Levenshtein with memoisation (independent of the DP
    implementation under test)."""
    from functools import lru_cache

    ref = tuple(ref)
    hyp = tuple(hyp)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(
            d(i - 1, j) + 1,
            d(i, j - 1) + 1,
            d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]),
        )

    return d(len(ref), len(hyp))
