"""Small decoder-only transformer wired through the FP8/BF16 precision map.

Layer layout (pre-norm, Qwen/Llama style)::

    r_in  = f_prev + r_mid_prev            (fused with RMS-norm 1)
    n1    = rmsnorm(r_in) * ln1
    q,k,v = rope(n1 @ w_qkv.T)
    att   = causal_sdpa(q, k, v)
    r_mid = att @ wo.T + r_in              (fused with RMS-norm 2)
    n2    = rmsnorm(r_mid) * ln2
    gu    = n2 @ w_gate_up.T
    a     = silu(gu[:, :h]) * gu[:, h:]
    f     = a @ w_down.T

``d_ff`` is the width of the concatenated gate|up projection, so the SwiGLU
hidden width is ``d_ff // 2``. The four block matmuls run in FP8 (E4M3
forward; E4M3 or E5M2 for activation gradients) when requested. Embedding,
LM-head, attention and gradient accumulation stay in BF16.

Recomputation drops activations after the forward pass and rebuilds them in
backward. Every quantization on the rebuild path reuses the absmax recorded
during the forward pass, so the rebuilt codes, and therefore all gradients,
are bitwise identical to the no-recompute run.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .numerics import (
    F8Kind,
    NonFiniteError,
    RngKey,
    absmax,
    quantize_absmax,
    quantize_with_absmax,
    round_bf16,
    stochastic_round_bf16,
    stream_id,
)
from .tensorops import (
    Workspace,
    embedding_backward_sorted,
    fused_cross_entropy_chunked,
    matmul_tn,
    rmsnorm,
    rmsnorm_backward,
    rmsnorm_residual_fused,
    sdpa_chunked,
    sdpa_chunked_backward,
    seq_matmul,
    swiglu,
    swiglu_backward,
    swiglu_fused,
    transpose_quantize,
)

__all__ = [
    "ModelConfig",
    "MatmulPrecision",
    "PrecisionMap",
    "Recompute",
    "RecomputeSet",
    "parse_recompute",
    "ForwardStats",
    "Saved",
    "MissingActivationError",
    "init_params",
    "param_layout",
    "forward",
    "backward",
    "lm_logits",
    "GradBuffers",
    "LmHeadEvent",
    "schedule_lmhead_backward",
    "REPLICATED_PARAMS",
]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    n_kv_heads: int = 4
    vocab: int = 512
    seq_len: int = 128
    rope_theta: float = 10000.0
    eps: float = 1e-6
    tie_embeddings: bool = False  # LM-head reuses the embedding table

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_heads % self.n_kv_heads:
            raise ValueError("n_heads must be a multiple of n_kv_heads")
        if self.d_ff % 2:
            raise ValueError("d_ff must be even (gate and up halves)")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def qkv_dim(self) -> int:
        return (self.n_heads + 2 * self.n_kv_heads) * self.head_dim


class MatmulPrecision(enum.Enum):
    FP8 = "fp8"
    BF16 = "bf16"
    F32 = "f32"


@dataclass(frozen=True)
class PrecisionMap:
    """Which precision each part of the network runs in.

    LM-head, attention and gradient accumulation are pinned to BF16 (or to
    plain f32 in the F32 debug mode, where no rounding happens anywhere).
    ``f32_grad_accum`` keeps the bf16 arithmetic but accumulates gradients in
    f32, for oracle comparisons.
    """

    block_matmuls: MatmulPrecision = MatmulPrecision.BF16
    backward_grads: F8Kind = F8Kind.E4M3
    f32_grad_accum: bool = False

    @property
    def lm_head(self) -> str:
        return "f32" if self.block_matmuls is MatmulPrecision.F32 else "bf16"

    attention = lm_head
    grad_accum = lm_head

    @property
    def fp8(self) -> bool:
        return self.block_matmuls is MatmulPrecision.FP8

    @property
    def bf16_storage(self) -> bool:
        return self.block_matmuls is not MatmulPrecision.F32

    @classmethod
    def parse(cls, name: str) -> "PrecisionMap":
        """'bf16', 'f32', 'fp8' / 'fp8-e4m3', or 'fp8-e5m2' (E5M2 activation gradients)."""
        name = name.lower()
        if name in ("fp8", "fp8-e4m3", "e4m3"):
            return cls(MatmulPrecision.FP8, F8Kind.E4M3)
        if name in ("fp8-e5m2", "fp8-e5m2-backward", "e5m2"):
            return cls(MatmulPrecision.FP8, F8Kind.E5M2)
        if name == "bf16":
            return cls(MatmulPrecision.BF16)
        if name == "f32":
            return cls(MatmulPrecision.F32)
        raise ValueError(f"unknown precision {name!r}")


class Recompute(enum.Enum):
    SWIGLU = "swiglu"
    RMSNORM = "rmsnorm"
    ATTENTION = "attention"
    FFN = "ffn"
    QKV = "qkv"
    BLOCK = "block"


RecomputeSet = frozenset

_RECOMPUTE_ALIASES = {"att": "attention", "attn": "attention", "norm": "rmsnorm"}


def parse_recompute(spec) -> frozenset:
    """``"FFN, Att"`` -> {FFN, ATTENTION}; ``""``, ``"---"`` or ``None`` -> empty."""
    if spec is None:
        return frozenset()
    if isinstance(spec, (set, frozenset, list, tuple)):
        items = [s.value if isinstance(s, Recompute) else str(s) for s in spec]
    else:
        items = str(spec).replace("+", ",").split(",")
    out = set()
    for item in items:
        item = item.strip().lower()
        if item in ("", "---", "-", "none"):
            continue
        out.add(Recompute(_RECOMPUTE_ALIASES.get(item, item)))
    return frozenset(out)


# tensors dropped after forward, per recompute flag
_DROPS = {
    Recompute.SWIGLU: {"a"},
    Recompute.RMSNORM: {"n1", "n2"},
    Recompute.ATTENTION: {"att", "lse"},
    Recompute.FFN: {"n2", "gu", "a"},
    Recompute.QKV: {"q", "k", "v"},
    Recompute.BLOCK: {"n1", "rstd1", "q", "k", "v", "att", "lse", "r_mid", "rstd2", "n2", "gu", "a"},
}
_ALL_LAYER_TENSORS = ("r_in", "n1", "rstd1", "q", "k", "v", "att", "lse", "r_mid", "rstd2", "n2", "gu", "a")


def kept_tensors(recompute) -> tuple:
    drop = set()
    for r in recompute:
        drop |= _DROPS[r]
    return tuple(n for n in _ALL_LAYER_TENSORS if n not in drop)


# LM-head and embedding are replicated across workers, never sharded
REPLICATED_PARAMS = ("embed", "lm_head")


def param_layout(cfg: ModelConfig) -> dict:
    """Ordered ``name -> shape`` of every trainable tensor."""
    d = cfg.d_model
    shapes = {"embed": (cfg.vocab, d)}
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        shapes[p + "ln1"] = (d,)
        shapes[p + "w_qkv"] = (cfg.qkv_dim, d)
        shapes[p + "wo"] = (d, cfg.n_heads * cfg.head_dim)
        shapes[p + "ln2"] = (d,)
        shapes[p + "w_gate_up"] = (cfg.d_ff, d)
        shapes[p + "w_down"] = (d, cfg.d_ff // 2)
    shapes["ln_f"] = (d,)
    if not cfg.tie_embeddings:
        shapes["lm_head"] = (cfg.vocab, d)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, bf16: bool = True) -> dict:
    """Scaled-normal init: std 1/sqrt(fan_in) for projections, 1 for the embedding."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_layout(cfg).items():
        if len(shape) == 1:
            w = np.ones(shape, dtype=np.float32)
        elif name == "embed":
            w = rng.standard_normal(shape).astype(np.float32)
        else:
            w = (rng.standard_normal(shape) / np.sqrt(shape[1])).astype(np.float32)
        params[name] = round_bf16(w) if bf16 else w
    return params


ForwardStats = dict  # (layer, site) -> absmax recorded in forward


class MissingActivationError(KeyError):
    pass


@dataclass
class Saved:
    cfg: ModelConfig
    prec: PrecisionMap
    recompute: frozenset
    tokens: np.ndarray
    layers: list
    stats: dict
    final: dict
    loss: float
    chunk_rows: int
    ce_chunk: int

    def nbytes(self) -> int:
        total = 0
        for layer in self.layers:
            total += sum(v.nbytes for v in layer.values())
        return total


class _Ctx:
    """Per-call precision helpers."""

    def __init__(self, prec: PrecisionMap, dtype):
        self.prec = prec
        self.bf16 = prec.bf16_storage and dtype == np.float32

    def rnd(self, x):
        return round_bf16(x) if self.bf16 else x


def _rope_tables(cfg: ModelConfig, t: int, dtype):
    half = cfg.head_dim // 2
    inv = cfg.rope_theta ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.arange(t, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rope(x, cos, sin):
    # x: (B, H, T, Dh)
    h = x.shape[-1] // 2
    x1, x2 = x[..., :h], x[..., h:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def _rope_backward(dy, cos, sin):
    h = dy.shape[-1] // 2
    d1, d2 = dy[..., :h], dy[..., h:]
    return np.concatenate([d1 * cos + d2 * sin, d2 * cos - d1 * sin], axis=-1)


def _check_finite(x, site: str):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values first seen at {site}")


def _linear_fwd(ctx: _Ctx, x2d, w, amax):
    """Block matmul ``x2d @ w.T``; ``amax`` is the activation absmax to quantize with."""
    if ctx.prec.fp8:
        y = matmul_tn(quantize_with_absmax(x2d, F8Kind.E4M3, amax), quantize_absmax(w, F8Kind.E4M3))
    else:
        y = seq_matmul(x2d, w)
    return ctx.rnd(y)


def _linear_bwd(ctx: _Ctx, dy2d, w, x2d, amax):
    """Returns ``(dx, dw)`` for ``y = x @ w.T``.

    In FP8 the operands of both gradient matmuls need the inner dimension
    last, so ``w``, ``dy`` and ``x`` go through transpose+quantize.
    """
    if ctx.prec.fp8:
        kind = ctx.prec.backward_grads
        dyq = quantize_absmax(dy2d, kind)
        dx = matmul_tn(dyq, transpose_quantize(w, F8Kind.E4M3))
        x_t = quantize_with_absmax(x2d, F8Kind.E4M3, amax).transpose()
        dw = matmul_tn(dyq.transpose(), x_t)
    else:
        dx = seq_matmul(dy2d, np.ascontiguousarray(w.T))
        dw = seq_matmul(np.ascontiguousarray(dy2d.T), np.ascontiguousarray(x2d.T))
    return ctx.rnd(dx), dw


def _split_heads(cfg, qkv, b, t):
    hd = cfg.head_dim
    nq = cfg.n_heads * hd
    nk = cfg.n_kv_heads * hd
    q = qkv[:, :nq].reshape(b, t, cfg.n_heads, hd).transpose(0, 2, 1, 3)
    k = qkv[:, nq:nq + nk].reshape(b, t, cfg.n_kv_heads, hd).transpose(0, 2, 1, 3)
    v = qkv[:, nq + nk:].reshape(b, t, cfg.n_kv_heads, hd).transpose(0, 2, 1, 3)
    return q, k, v


def _merge_heads(x):
    b, h, t, d = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b * t, h * d)


class _LayerRunner:
    """Computes one layer's activations from whatever is available.

    ``get(name)`` returns a saved tensor or rebuilds it (and its missing
    inputs) using cached absmax statistics.
    """

    def __init__(self, cfg, ctx, params, layer, store, stats, rope, chunk_rows, shape, recompute_ok):
        self.cfg, self.ctx, self.params, self.layer = cfg, ctx, params, layer
        self.store, self.stats, self.rope = store, stats, rope
        self.chunk_rows, self.shape = chunk_rows, shape
        self.recompute_ok = recompute_ok
        self.p = f"layers.{layer}."

    def get(self, name):
        if name in self.store:
            return self.store[name]
        if not self.recompute_ok or name == "r_in":
            raise MissingActivationError(f"layer {self.layer}: '{name}' was neither saved nor recomputable")
        self._rebuild(name)
        return self.store[name]

    def _rebuild(self, name):
        cfg, ctx, p = self.cfg, self.ctx, self.p
        b, t = self.shape
        s = self.store
        if name in ("n1", "rstd1"):
            s["n1"], s["rstd1"] = rmsnorm(self.get("r_in"), self.params[p + "ln1"], cfg.eps, bf16=ctx.bf16)
        elif name in ("q", "k", "v"):
            qkv = _linear_fwd(ctx, self.get("n1"), self.params[p + "w_qkv"], self.stats[(self.layer, "n1")])
            self._set_qkv(qkv, b, t)
        elif name in ("att", "lse"):
            att, lse = sdpa_chunked(self.get("q"), self.get("k"), self.get("v"), self.chunk_rows,
                                    bf16=ctx.bf16, return_lse=True)
            s["att"], s["lse"] = _merge_heads(att), lse
        elif name in ("r_mid", "rstd2"):
            o = _linear_fwd(ctx, self.get("att"), self.params[p + "wo"], self.stats[(self.layer, "att")])
            r_mid = ctx.rnd(o + self.get("r_in"))
            s["r_mid"] = r_mid
            _, s["rstd2"] = rmsnorm(r_mid, self.params[p + "ln2"], cfg.eps, bf16=ctx.bf16)
        elif name == "n2":
            s["n2"], _ = rmsnorm(self.get("r_mid"), self.params[p + "ln2"], cfg.eps, bf16=ctx.bf16)
        elif name == "gu":
            s["gu"] = _linear_fwd(ctx, self.get("n2"), self.params[p + "w_gate_up"], self.stats[(self.layer, "n2")])
        elif name == "a":
            s["a"] = swiglu(self.get("gu"), bf16=ctx.bf16)
        else:
            raise MissingActivationError(name)

    def _set_qkv(self, qkv, b, t):
        q, k, v = _split_heads(self.cfg, qkv, b, t)
        cos, sin = self.rope
        self.store["q"] = self.ctx.rnd(_rope(q, cos, sin))
        self.store["k"] = self.ctx.rnd(_rope(k, cos, sin))
        self.store["v"] = np.ascontiguousarray(v)

    def _check(self, x, site):
        self.site = site
        _check_finite(x, self.p + site)

    def forward(self, x, residual):
        """Full forward of the layer; returns ``(f, r_mid)`` and fills the store.

        ``self.site`` always names the op being computed, so a NonFiniteError
        can be attributed to the first site that went bad.
        """
        cfg, ctx, p, L = self.cfg, self.ctx, self.p, self.layer
        b, t = self.shape
        s = self.store
        self.site = "ln1"
        r_in, n1, rstd1 = rmsnorm_residual_fused(x, residual, self.params[p + "ln1"], cfg.eps, bf16=ctx.bf16)
        s["r_in"], s["n1"], s["rstd1"] = r_in, n1.value, rstd1
        self.stats[(L, "n1")] = n1.absmax
        self.site = "w_qkv"
        qkv = _linear_fwd(ctx, n1.value, self.params[p + "w_qkv"], n1.absmax)
        self._check(qkv, "w_qkv")
        self._set_qkv(qkv, b, t)
        self.site = "attention"
        att, lse = sdpa_chunked(s["q"], s["k"], s["v"], self.chunk_rows, bf16=ctx.bf16, return_lse=True)
        s["att"], s["lse"] = _merge_heads(att), lse
        self.stats[(L, "att")] = absmax(s["att"])
        self.site = "wo"
        o = _linear_fwd(ctx, s["att"], self.params[p + "wo"], self.stats[(L, "att")])
        self._check(o, "wo")
        self.site = "ln2"
        r_mid, n2, rstd2 = rmsnorm_residual_fused(o, r_in, self.params[p + "ln2"], cfg.eps, bf16=ctx.bf16)
        s["r_mid"], s["n2"], s["rstd2"] = r_mid, n2.value, rstd2
        self.stats[(L, "n2")] = n2.absmax
        self.site = "w_gate_up"
        s["gu"] = _linear_fwd(ctx, n2.value, self.params[p + "w_gate_up"], n2.absmax)
        self._check(s["gu"], "w_gate_up")
        self.site = "swiglu"
        a = swiglu_fused(s["gu"], bf16=ctx.bf16)
        s["a"] = a.value
        self.stats[(L, "a")] = a.absmax
        self.site = "w_down"
        f = _linear_fwd(ctx, a.value, self.params[p + "w_down"], a.absmax)
        self._check(f, "w_down")
        return f, r_mid

    def backward(self, d_r, grads: dict):
        """Backprop through the layer given d(loss)/d(residual after FFN)."""
        cfg, ctx, p, L = self.cfg, self.ctx, self.p, self.layer
        b, t = self.shape
        stats = self.stats
        # FFN
        d_a, grads[p + "w_down"] = _linear_bwd(ctx, d_r, self.params[p + "w_down"], self.get("a"), stats[(L, "a")])
        d_gu = ctx.rnd(swiglu_backward(d_a, self.get("gu")))
        d_n2, grads[p + "w_gate_up"] = _linear_bwd(ctx, d_gu, self.params[p + "w_gate_up"], self.get("n2"),
                                                   stats[(L, "n2")])
        dr2, grads[p + "ln2"] = rmsnorm_backward(d_n2, self.get("r_mid"), self.get("rstd2"), self.params[p + "ln2"])
        d_mid = ctx.rnd(d_r + dr2)
        # attention
        d_att, grads[p + "wo"] = _linear_bwd(ctx, d_mid, self.params[p + "wo"], self.get("att"), stats[(L, "att")])
        hd = cfg.head_dim
        d_att4 = d_att.reshape(b, t, cfg.n_heads, hd).transpose(0, 2, 1, 3)
        dq, dk, dv = sdpa_chunked_backward(self.get("q"), self.get("k"), self.get("v"),
                                           self._att4(), self.get("lse"), d_att4, self.chunk_rows, bf16=ctx.bf16)
        cos, sin = self.rope
        dq = _rope_backward(dq, cos, sin)
        dk = _rope_backward(dk, cos, sin)
        d_qkv = ctx.rnd(np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=1))
        d_n1, grads[p + "w_qkv"] = _linear_bwd(ctx, d_qkv, self.params[p + "w_qkv"], self.get("n1"),
                                               stats[(L, "n1")])
        dr1, grads[p + "ln1"] = rmsnorm_backward(d_n1, self.get("r_in"), self.get("rstd1"), self.params[p + "ln1"])
        return ctx.rnd(d_mid + dr1)

    def _att4(self):
        b, t = self.shape
        cfg = self.cfg
        return self.get("att").reshape(b, t, cfg.n_heads, cfg.head_dim).transpose(0, 2, 1, 3)


def _tokens_targets(cfg: ModelConfig, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("tokens must be (batch, seq_len + 1)")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError(f"token ids must lie in [0, {cfg.vocab})")
    return tokens[:, :-1], tokens[:, 1:]


def _lm_head(cfg: ModelConfig, params: dict) -> np.ndarray:
    return params["embed"] if cfg.tie_embeddings else params["lm_head"]


def forward(cfg: ModelConfig, params: dict, tokens, recompute=frozenset(), prec: PrecisionMap = PrecisionMap(),
            chunk_rows: int | None = None, ce_chunk: int | None = None, normalizer: int | None = None,
            workspace: Workspace | None = None):
    """Forward pass plus the fused LM-head/cross-entropy.

    ``tokens`` has shape (batch, T + 1); inputs are ``tokens[:, :-1]`` and
    targets ``tokens[:, 1:]``. Returns ``(loss, saved)``.
    """
    recompute = parse_recompute(recompute)
    inp, tgt = _tokens_targets(cfg, tokens)
    b, t = inp.shape
    dtype = params["embed"].dtype
    ctx = _Ctx(prec, dtype)
    chunk_rows = chunk_rows or t
    ce_chunk = ce_chunk or b * t
    rope = _rope_tables(cfg, t, dtype)
    stats: dict = {}
    keep = kept_tensors(recompute)

    x = params["embed"][inp.reshape(-1)]
    _check_finite(x, "embed")
    residual = np.zeros_like(x)
    layers = []
    with np.errstate(invalid="ignore", over="ignore"):
        for layer in range(cfg.n_layers):
            runner = _LayerRunner(cfg, ctx, params, layer, {}, stats, rope, chunk_rows, (b, t), True)
            try:
                x, residual = runner.forward(x, residual)
            except NonFiniteError as exc:
                if "first seen" in str(exc):
                    raise
                raise NonFiniteError(f"non-finite values first seen at {runner.p}{runner.site}") from exc
            layers.append({k: runner.store[k] for k in keep})
        try:
            r_final, hn, rstd_f = rmsnorm_residual_fused(x, residual, params["ln_f"], cfg.eps, bf16=ctx.bf16)
        except NonFiniteError as exc:
            raise NonFiniteError("non-finite values first seen at ln_f") from exc
        loss, d_hn, d_lm = fused_cross_entropy_chunked(hn.value, _lm_head(cfg, params), tgt, ce_chunk,
                                                       normalizer=normalizer, bf16=ctx.bf16, workspace=workspace)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite values first seen at lm_head/cross_entropy")
    final = {"r_final": r_final, "hn": hn.value, "rstd_f": rstd_f, "d_hn": d_hn, "d_lm_head": d_lm}
    saved = Saved(cfg, prec, recompute, np.asarray(tokens), layers, stats, final, float(loss), chunk_rows, ce_chunk)
    return float(loss), saved


def lm_logits(cfg: ModelConfig, params: dict, inputs, prec: PrecisionMap = PrecisionMap()) -> np.ndarray:
    """Next-token logits (batch, T, vocab) for inputs of shape (batch, T); inference only."""
    inputs = np.asarray(inputs)
    if inputs.ndim != 2 or inputs.min() < 0 or inputs.max() >= cfg.vocab:
        raise ValueError(f"inputs must be (batch, T) token ids in [0, {cfg.vocab})")
    b, t = inputs.shape
    dtype = params["embed"].dtype
    ctx = _Ctx(prec, dtype)
    rope = _rope_tables(cfg, t, dtype)
    x = params["embed"][inputs.reshape(-1)]
    residual = np.zeros_like(x)
    for layer in range(cfg.n_layers):
        runner = _LayerRunner(cfg, ctx, params, layer, {}, {}, rope, t, (b, t), True)
        x, residual = runner.forward(x, residual)
    _, hn, _ = rmsnorm_residual_fused(x, residual, params["ln_f"], cfg.eps, bf16=ctx.bf16)
    logits = hn.value.astype(np.float32) @ _lm_head(cfg, params).astype(np.float32).T
    return logits.reshape(b, t, cfg.vocab)


def backward(saved: Saved, params: dict, recompute=None, prec: PrecisionMap | None = None) -> dict:
    """Gradients (raw, not yet accumulated) for every parameter.

    ``recompute``/``prec`` default to the forward settings and must match them.
    """
    if recompute is not None and parse_recompute(recompute) != saved.recompute:
        raise ValueError("backward recompute set differs from the forward pass")
    if prec is not None and prec != saved.prec:
        raise ValueError("backward precision map differs from the forward pass")
    cfg = saved.cfg
    ctx = _Ctx(saved.prec, params["embed"].dtype)
    inp, _ = _tokens_targets(cfg, saved.tokens)
    b, t = inp.shape
    rope = _rope_tables(cfg, t, params["embed"].dtype)
    grads: dict = {} if cfg.tie_embeddings else {"lm_head": saved.final["d_lm_head"]}
    d_r, grads["ln_f"] = rmsnorm_backward(saved.final["d_hn"], saved.final["r_final"], saved.final["rstd_f"],
                                          params["ln_f"])
    d_r = ctx.rnd(d_r)
    for layer in reversed(range(cfg.n_layers)):
        store = dict(saved.layers[layer])
        runner = _LayerRunner(cfg, ctx, params, layer, store, saved.stats, rope, saved.chunk_rows, (b, t), True)
        d_r = runner.backward(d_r, grads)
        _check_finite(d_r, f"layers.{layer}.backward")
    grads["embed"] = embedding_backward_sorted(inp, d_r, cfg.vocab)
    if cfg.tie_embeddings:
        grads["embed"] = grads["embed"] + saved.final["d_lm_head"]
    return {name: grads[name] for name in params}


class GradBuffers:
    """Gradient accumulators, BF16 with stochastic rounding (or f32 in debug modes).

    Keys for the stochastic rounding depend on (seed, parameter, micro-step),
    never on execution order.
    """

    def __init__(self, params: dict, prec: PrecisionMap, seed: int = 0):
        self.bf16 = prec.bf16_storage and not prec.f32_grad_accum
        self.seed = seed
        self.buffers = {k: np.zeros_like(v) for k, v in params.items()}

    def accumulate(self, grads: dict, micro_step: int) -> None:
        for name, g in grads.items():
            buf = self.buffers[name]
            total = buf + g
            if self.bf16:
                key = RngKey(self.seed, stream_id("grad", name), micro_step * buf.size)
                self.buffers[name] = stochastic_round_bf16(total, key)
            else:
                self.buffers[name] = total

    def zero(self) -> None:
        for v in self.buffers.values():
            v[...] = 0


@dataclass(frozen=True)
class LmHeadEvent:
    micro_step: int
    stream: str  # "main" or "copy"
    op: str
    chunk: int | None = None
    overlaps: str | None = None


def schedule_lmhead_backward(n_workers: int, ga_steps: int, n_chunks: int = 1, n_layers: int = 0) -> list:
    """Event order for the LM-head backward across a gradient-accumulation window.

    Per chunk the weight-gradient matmul comes first so its result can start
    moving while the input-gradient matmul runs. The LM-head/embedding
    gradients of replicated parameters are synchronized once, at the last
    accumulation step; the send can only start after the final chunk.
    """
    events = []
    for step in range(1, ga_steps + 1):
        last = step == ga_steps
        for c in range(n_chunks):
            events.append(LmHeadEvent(step, "main", "lmhead_dW", c))
            if last and n_workers > 1 and c == n_chunks - 1:
                events.append(LmHeadEvent(step, "copy", "send_lmhead_grad", c, overlaps="lmhead_dX"))
            events.append(LmHeadEvent(step, "main", "lmhead_dX", c))
        for layer in reversed(range(n_layers)):
            events.append(LmHeadEvent(step, "main", f"block_backward_{layer}"))
        events.append(LmHeadEvent(step, "main", "embedding_backward"))
        if last and n_workers > 1:
            events.append(LmHeadEvent(step, "copy", "send_embedding_grad"))
            events.append(LmHeadEvent(step, "main", "global_norm"))
    return events
