"""Deterministic dense kernels with fused absmax outputs.

Determinism contract: every reduction runs sequentially in ascending index
order. The kernels never rely on BLAS for accumulation, so results do not
depend on thread count, blocking, or the chunk size of chunked kernels.

Arrays are float32 by default. The kernels keep whatever floating dtype they
are given, which lets gradient checks run the exact same code in float64.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .numerics import F8Kind, ScaledQuant, absmax, quantize_absmax, round_bf16

__all__ = [
    "FusedOut",
    "Workspace",
    "seq_matmul",
    "seq_sum",
    "matmul_tn",
    "residual_add",
    "rmsnorm",
    "rmsnorm_residual_fused",
    "rmsnorm_backward",
    "swiglu",
    "swiglu_fused",
    "swiglu_backward",
    "transpose_quantize",
    "sdpa_chunked",
    "sdpa_chunked_backward",
    "deterministic_reduce",
    "blocked_sum",
    "embedding_backward_sorted",
    "fused_cross_entropy_chunked",
]


@dataclass
class FusedOut:
    value: np.ndarray
    absmax: np.float32


class Workspace:
    """High-water tracker for scratch memory of chunked kernels."""

    def __init__(self):
        self.peak_bytes = 0

    def note(self, nbytes: int) -> None:
        self.peak_bytes = max(self.peak_bytes, int(nbytes))


def _dtype(*arrays) -> np.dtype:
    dt = np.result_type(*arrays)
    return np.dtype(np.float64) if dt == np.float64 else np.dtype(np.float32)


def _maybe_bf16(x: np.ndarray, bf16: bool) -> np.ndarray:
    if bf16 and x.dtype == np.float32:
        return round_bf16(x)
    return x


def seq_matmul(a: np.ndarray, b: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """``out[..., i, j] (+)= sum_k a[..., i, k] * b[..., j, k]`` with k ascending.

    Both operands carry the inner dimension last (TN layout). When ``out`` is
    given the products are added onto it, continuing the same sequential
    chain, so splitting k across several calls gives bitwise the same answer.
    """
    dt = _dtype(a, b)
    a = np.asarray(a, dtype=dt)
    b = np.asarray(b, dtype=dt)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"inner dimensions differ: {a.shape} vs {b.shape}")
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    m, k = a.shape[-2:]
    n = b.shape[-2]
    if out is None:
        acc = np.zeros(lead + (m, n), dtype=dt)
    else:
        if out.shape != lead + (m, n):
            raise ValueError(f"accumulator shape {out.shape} != {lead + (m, n)}")
        acc = out
    if k == 0:
        return acc
    ak = np.ascontiguousarray(np.moveaxis(a, -1, 0))[..., :, None]
    bk = np.ascontiguousarray(np.moveaxis(b, -1, 0))[..., None, :]
    tmp = np.empty_like(acc)
    for i in range(k):
        np.multiply(ak[i], bk[i], out=tmp)
        acc += tmp
    return acc


def seq_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sequential ascending-index sum along ``axis``."""
    x = np.asarray(x)
    if x.shape[axis] == 0:
        return np.zeros(np.delete(np.array(x.shape), axis), dtype=x.dtype)
    return np.take(np.add.accumulate(x, axis=axis, dtype=x.dtype), -1, axis=axis)


def matmul_tn(a, b) -> np.ndarray:
    """``a @ b.T`` with sequential f32 accumulation over the shared last axis.

    FP8 operands (``ScaledQuant``) are multiplied in their scaled domain and
    the product of the two scales is divided out once at the end.
    """
    if isinstance(a, ScaledQuant) != isinstance(b, ScaledQuant):
        raise TypeError("matmul_tn needs both operands quantized or both plain")
    if isinstance(a, ScaledQuant):
        acc = seq_matmul(a.decoded(), b.decoded())
        return acc / np.float32(a.scale * b.scale)
    return seq_matmul(a, b)


def residual_add(x: np.ndarray, residual: np.ndarray) -> np.ndarray:
    return x + residual


def rmsnorm(r: np.ndarray, gamma: np.ndarray, eps: float = 1e-6, bf16: bool = False):
    """Unfused RMS-norm; returns ``(normed, rstd)``."""
    dt = r.dtype
    ms = seq_sum(r * r) / dt.type(r.shape[-1])
    rstd = dt.type(1.0) / np.sqrt(ms + dt.type(eps))
    normed = _maybe_bf16((r * rstd[..., None]) * gamma, bf16)
    return normed, rstd


def rmsnorm_residual_fused(x, residual, gamma, eps: float = 1e-6, bf16: bool = False):
    """Residual add + RMS-norm in one pass, with the absmax of the normed output.

    Returns ``(new_residual, FusedOut(normed, absmax), rstd)``.
    """
    dt = _dtype(x, residual, gamma)
    x = np.asarray(x, dtype=dt)
    residual = np.asarray(residual, dtype=dt)
    gamma = np.asarray(gamma, dtype=dt)
    if x.shape != residual.shape or x.shape[-1] != gamma.shape[-1]:
        raise ValueError("hidden dimensions of x, residual and gamma must match")
    r = _maybe_bf16(x + residual, bf16)
    ms = seq_sum(r * r) / dt.type(r.shape[-1])
    rstd = dt.type(1.0) / np.sqrt(ms + dt.type(eps))
    normed = _maybe_bf16((r * rstd[..., None]) * gamma, bf16)
    return r, FusedOut(normed, absmax(normed)), rstd


def rmsnorm_backward(d_normed, r, rstd, gamma):
    """Gradients of ``normed = r * rstd * gamma`` w.r.t. ``r`` and ``gamma``.

    ``d_gamma`` sums over all leading positions in ascending order.
    """
    dt = d_normed.dtype
    d = r.shape[-1]
    n_hat = r * rstd[..., None]
    flat_dn = d_normed.reshape(-1, d)
    d_gamma = seq_sum(flat_dn * n_hat.reshape(-1, d), axis=0)
    dn_hat = d_normed * gamma
    proj = seq_sum(dn_hat * n_hat) / dt.type(d)
    dr = rstd[..., None] * (dn_hat - n_hat * proj[..., None])
    return dr, d_gamma


def _split_gate_up(gate_up: np.ndarray):
    if gate_up.shape[-1] % 2:
        raise ValueError(f"SwiGLU input needs an even last dimension, got {gate_up.shape[-1]}")
    h = gate_up.shape[-1] // 2
    return gate_up[..., :h], gate_up[..., h:]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def swiglu(gate_up: np.ndarray, bf16: bool = False) -> np.ndarray:
    gate, up = _split_gate_up(gate_up)
    return _maybe_bf16(gate * _sigmoid(gate) * up, bf16)


def swiglu_fused(gate_up: np.ndarray, bf16: bool = False) -> FusedOut:
    """``silu(gate) * up`` over the two halves of the last axis, plus its absmax."""
    out = swiglu(gate_up, bf16=bf16)
    return FusedOut(out, absmax(out))


def swiglu_backward(d_out: np.ndarray, gate_up: np.ndarray) -> np.ndarray:
    gate, up = _split_gate_up(gate_up)
    s = _sigmoid(gate)
    silu = gate * s
    d_gate = d_out * up * (s * (1.0 + gate * (1.0 - s)))
    d_up = d_out * silu
    return np.concatenate([d_gate, d_up], axis=-1)


def transpose_quantize(t: np.ndarray, kind: F8Kind) -> ScaledQuant:
    """Quantize a 2-D tensor and emit the codes in transposed layout."""
    t = np.asarray(t)
    if t.ndim != 2:
        raise ValueError(f"transpose_quantize expects a 2-D tensor, got shape {t.shape}")
    return quantize_absmax(t, kind).transpose()


# --------------------------------------------------------------------------
# attention


def _expand_kv(x: np.ndarray, n_heads: int) -> np.ndarray:
    rep = n_heads // x.shape[1]
    return x if rep == 1 else np.repeat(x, rep, axis=1)


def _fold_kv(dx: np.ndarray, n_kv: int) -> np.ndarray:
    b, h, t, d = dx.shape
    rep = h // n_kv
    if rep == 1:
        return dx
    return seq_sum(dx.reshape(b, n_kv, rep, t, d), axis=2)


def _check_attn(q, k, v, chunk_rows):
    if q.ndim != 4 or k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2:] != k.shape[2:]:
        raise ValueError(f"bad attention shapes q={q.shape} k={k.shape} v={v.shape}")
    if q.shape[1] % k.shape[1]:
        raise ValueError("query heads must be a multiple of key/value heads")
    if chunk_rows < 1:
        raise ValueError("chunk_rows must be >= 1")
    return min(int(chunk_rows), q.shape[2])


def _chunk_scores(q_c, k, r0, scale):
    t = k.shape[2]
    rows = q_c.shape[2]
    s = seq_matmul(q_c, k) * scale
    mask = np.arange(t)[None, :] > (r0 + np.arange(rows))[:, None]
    s[..., mask] = -np.inf
    return s


def sdpa_chunked(q, k, v, chunk_rows: int, bf16: bool = False, workspace: Workspace | None = None,
                 return_lse: bool = False):
    """Causal scaled-dot-product attention, computed ``chunk_rows`` query rows at a time.

    q: (B, H, T, Dh); k, v: (B, Hkv, T, Dh). Softmax internals run in the
    working dtype; only the output is rounded to bf16 when ``bf16`` is set.
    Each output row depends on its own query row only, so the chunk size
    cannot change the result.
    """
    chunk_rows = _check_attn(q, k, v, chunk_rows)
    dt = _dtype(q, k, v)
    b, h, t, dh = q.shape
    kx = _expand_kv(np.asarray(k, dtype=dt), h)
    vt = np.ascontiguousarray(np.swapaxes(_expand_kv(np.asarray(v, dtype=dt), h), -1, -2))
    scale = dt.type(1.0 / np.sqrt(dh))
    out = np.empty((b, h, t, dh), dtype=dt)
    lse = np.empty((b, h, t), dtype=dt)
    for r0 in range(0, t, chunk_rows):
        r1 = min(t, r0 + chunk_rows)
        s = _chunk_scores(np.asarray(q[:, :, r0:r1], dtype=dt), kx, r0, scale)
        m = np.max(s, axis=-1)
        p = np.exp(s - m[..., None])
        denom = seq_sum(p)
        p = p / denom[..., None]
        out[:, :, r0:r1] = seq_matmul(p, vt)
        lse[:, :, r0:r1] = m + np.log(denom)
        if workspace is not None:
            workspace.note(2 * s.nbytes)
    out = _maybe_bf16(out, bf16)
    return (out, lse) if return_lse else out


def sdpa_chunked_backward(q, k, v, out, lse, d_out, chunk_rows: int, bf16: bool = False,
                          workspace: Workspace | None = None):
    """Backward of :func:`sdpa_chunked`; returns ``(dq, dk, dv)``.

    dk/dv are running accumulators over query rows in ascending order, so
    the chunk boundaries do not show up in the bits.
    """
    chunk_rows = _check_attn(q, k, v, chunk_rows)
    dt = _dtype(q, k, v, d_out)
    b, h, t, dh = q.shape
    n_kv = k.shape[1]
    kx = _expand_kv(np.asarray(k, dtype=dt), h)
    vx = _expand_kv(np.asarray(v, dtype=dt), h)
    kt = np.ascontiguousarray(np.swapaxes(kx, -1, -2))
    scale = dt.type(1.0 / np.sqrt(dh))
    dq = np.empty((b, h, t, dh), dtype=dt)
    dk = np.zeros((b, h, t, dh), dtype=dt)
    dv = np.zeros((b, h, t, dh), dtype=dt)
    for r0 in range(0, t, chunk_rows):
        r1 = min(t, r0 + chunk_rows)
        q_c = np.asarray(q[:, :, r0:r1], dtype=dt)
        do_c = np.asarray(d_out[:, :, r0:r1], dtype=dt)
        s = _chunk_scores(q_c, kx, r0, scale)
        p = np.exp(s - lse[:, :, r0:r1, None])
        pt = np.ascontiguousarray(np.swapaxes(p, -1, -2))
        seq_matmul(pt, np.swapaxes(do_c, -1, -2), out=dv)
        dp = seq_matmul(do_c, vx)
        delta = seq_sum(do_c * np.asarray(out[:, :, r0:r1], dtype=dt))
        ds = p * (dp - delta[..., None]) * scale
        dq[:, :, r0:r1] = seq_matmul(ds, kt)
        seq_matmul(np.ascontiguousarray(np.swapaxes(ds, -1, -2)), np.swapaxes(q_c, -1, -2), out=dk)
        if workspace is not None:
            workspace.note(3 * s.nbytes)
    dk = _fold_kv(dk, n_kv)
    dv = _fold_kv(dv, n_kv)
    return _maybe_bf16(dq, bf16), _maybe_bf16(dk, bf16), _maybe_bf16(dv, bf16)


# --------------------------------------------------------------------------
# reductions


def deterministic_reduce(partials) -> np.ndarray:
    """Sum equally shaped partial buffers in list order."""
    partials = list(partials)
    if not partials:
        raise ValueError("deterministic_reduce needs at least one partial")
    out = np.array(partials[0], copy=True)
    for p in partials[1:]:
        if p.shape != out.shape:
            raise ValueError(f"partial shapes differ: {p.shape} vs {out.shape}")
        out += p
    return out


def blocked_sum(x: np.ndarray, block: int = 1024, threads: int = 1) -> np.ndarray:
    """Two-phase reduction over axis 0: per-block partials, then an ordered reduce.

    The block partition is fixed by ``block`` alone; ``threads`` only changes
    who computes which partial, never the bits.
    """
    x = np.asarray(x)
    starts = list(range(0, x.shape[0], block)) or [0]
    partials: list = [None] * len(starts)

    def work(i):
        partials[i] = seq_sum(x[starts[i]:starts[i] + block], axis=0)

    if threads <= 1:
        for i in range(len(starts)):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(len(starts))))
    return deterministic_reduce(partials)


def embedding_backward_sorted(token_ids, grad_out, vocab: int) -> np.ndarray:
    """Embedding-table gradient without atomics.

    Token positions are stably sorted by id so each row's contributions are
    added in ascending position order. The loop runs over occurrence rank,
    vectorized across distinct tokens.
    """
    ids = np.asarray(token_ids).reshape(-1)
    g = np.asarray(grad_out)
    g = g.reshape(ids.size, -1)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"token id out of range [0, {vocab})")
    grad = np.zeros((vocab, g.shape[1]), dtype=g.dtype)
    if ids.size == 0:
        return grad
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    new_run = np.r_[True, sorted_ids[1:] != sorted_ids[:-1]]
    run_start = np.maximum.accumulate(np.where(new_run, np.arange(ids.size), 0))
    rank = np.arange(ids.size) - run_start
    for r in range(int(rank.max()) + 1):
        sel = rank == r
        grad[sorted_ids[sel]] += g[order[sel]]
    return grad


def fused_cross_entropy_chunked(hidden, lm_w, targets, chunk_tokens: int, normalizer: int | None = None,
                                bf16: bool = False, workspace: Workspace | None = None):
    """LM-head matmul + softmax cross-entropy + backward, ``chunk_tokens`` rows at a time.

    Returns ``(loss, d_hidden, d_lm_w)``. Loss is the sum of per-token losses
    divided by ``normalizer`` (default: token count). Only one chunk of logits
    exists at any time. ``d_lm_w`` is a running accumulator over tokens in
    ascending order, so it is chunk-size independent bit for bit.
    """
    dt = _dtype(hidden, lm_w)
    hidden = np.asarray(hidden, dtype=dt)
    lm_w = np.asarray(lm_w, dtype=dt)
    targets = np.asarray(targets).reshape(-1)
    n, d = hidden.shape
    vocab = lm_w.shape[0]
    if chunk_tokens < 1:
        raise ValueError("chunk_tokens must be >= 1")
    if targets.size != n:
        raise ValueError("one target per hidden row required")
    if n and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"target id out of range [0, {vocab})")
    norm = dt.type(n if normalizer is None else normalizer)
    lm_wt = np.ascontiguousarray(lm_w.T)
    d_hidden = np.empty_like(hidden)
    d_lm_w = np.zeros_like(lm_w)
    loss_acc = np.zeros(1, dtype=dt)
    for c0 in range(0, n, chunk_tokens):
        c1 = min(n, c0 + chunk_tokens)
        h_c = hidden[c0:c1]
        tgt = targets[c0:c1]
        logits = seq_matmul(h_c, lm_w)
        m = np.max(logits, axis=-1)
        e = np.exp(logits - m[:, None])
        denom = seq_sum(e)
        lse = m + np.log(denom)
        rows = np.arange(c1 - c0)
        tok_loss = lse - logits[rows, tgt]
        loss_acc = np.add.accumulate(np.concatenate([loss_acc, tok_loss]))[-1:]
        dlogits = e / denom[:, None]
        dlogits[rows, tgt] -= dt.type(1.0)
        dlogits /= norm
        d_hidden[c0:c1] = seq_matmul(dlogits, lm_wt)
        seq_matmul(np.ascontiguousarray(dlogits.T), np.ascontiguousarray(h_c.T), out=d_lm_w)
        if workspace is not None:
            workspace.note(2 * logits.nbytes)
    loss = loss_acc[0] / norm
    return loss, _maybe_bf16(d_hidden, bf16), d_lm_w
