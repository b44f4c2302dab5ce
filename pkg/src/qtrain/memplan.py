"""Analytical planner: memory, FLOPs, step time, MFU, and configuration search.

Units: bytes and FLOPs are plain floats; ``GB`` is 1e9 bytes. Device
capacities of the shipped profiles are the physical (binary) sizes.

Parameter classes
-----------------
* block parameters: the matmul weights inside the transformer blocks. These
  run in FP8 in FP8 mode and are the only ones that can be streamed/offloaded
  (theta, g).
* embedding and LM-head: always BF16, always replicated and device-resident.
  Their moments (m, v) can still be offloaded.

Precision-dependent weight copies
---------------------------------
FP8: bf16 master (theta*, 2 B) plus FP8 working copy of block weights
(theta, 1 B + one f32 scale per tensor). BF16: the master copy is the working
copy, so theta covers it and theta* has no separate effect.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, replace
from importlib import resources

import yaml

from .model import MatmulPrecision, ModelConfig, PrecisionMap, Recompute, parse_recompute
from .offload import (
    DEFAULT_LATENCY,
    LayerSizes,
    Offload,
    format_offload,
    parse_offload,
)

__all__ = [
    "GB",
    "GiB",
    "HardwareProfile",
    "load_profile",
    "available_profiles",
    "ParamCounts",
    "param_counts",
    "ARCHS",
    "arch",
    "PlannerConstants",
    "CONSTANTS",
    "RunPlan",
    "MemoryBreakdown",
    "memory_breakdown",
    "FlopBreakdown",
    "flop_breakdown",
    "lower_bound_seconds_per_token",
    "mfu",
    "fp8_speedup_ceiling",
    "TimeBreakdown",
    "estimate_step_time",
    "SearchResult",
    "search_plan",
    "max_micro_batch",
    "RECOMPUTE_LEVELS",
    "MICRO_BATCHES",
]

GB = 1e9
GiB = 2 ** 30


# --------------------------------------------------------------------------
# hardware


@dataclass(frozen=True)
class HardwareProfile:
    name: str
    device_bytes: float
    host_bytes: float
    peak_flops: dict  # precision -> FLOP/s ("bf16", "fp8")
    mem_bandwidth: float
    link_bandwidth: float
    p2p: bool
    attainable_fraction: float = 1.0
    zero_copy_efficiency: float = 1.0
    double_buffer_efficiency: float = 1.0

    def __post_init__(self):
        if not 0 < self.attainable_fraction <= 1.2:
            raise ValueError("attainable_fraction must lie in (0, 1.2]")

    def peak(self, precision: str) -> float:
        try:
            return float(self.peak_flops[precision])
        except KeyError:
            raise KeyError(f"profile {self.name} has no peak for precision {precision!r}") from None

    @classmethod
    def from_dict(cls, d: dict) -> "HardwareProfile":
        d = dict(d)
        d["peak_flops"] = {k: float(v) for k, v in d["peak_flops"].items()}
        for k in ("device_bytes", "host_bytes", "mem_bandwidth", "link_bandwidth"):
            d[k] = float(d[k])
        return cls(**d)


def _profile_dir():
    return resources.files("qtrain") / "profiles"


def available_profiles() -> list:
    return sorted(p.name[:-5] for p in _profile_dir().iterdir() if p.name.endswith(".yaml"))


def load_profile(name_or_path: str) -> HardwareProfile:
    """Load a shipped profile by name (case-insensitive) or a YAML file path."""
    path = None
    for cand in available_profiles():
        if cand.lower() == str(name_or_path).lower():
            path = _profile_dir() / f"{cand}.yaml"
    if path is None:
        import os

        if os.path.exists(str(name_or_path)):
            path = name_or_path
        else:
            raise KeyError(f"unknown hardware profile {name_or_path!r}; available: {', '.join(available_profiles())}")
    with open(path) if isinstance(path, str) else path.open() as fh:
        return HardwareProfile.from_dict(yaml.safe_load(fh))


# --------------------------------------------------------------------------
# model sizes


@dataclass(frozen=True)
class ParamCounts:
    block: float
    embed: float
    lm_head: float
    n_block_tensors: int = 0

    @property
    def total(self) -> float:
        return self.block + self.embed + self.lm_head

    @property
    def replicated(self) -> float:
        return self.embed + self.lm_head

    @classmethod
    def nominal(cls, total: float) -> "ParamCounts":
        """A round parameter count with everything treated as block parameters."""
        return cls(float(total), 0.0, 0.0, 0)


def param_counts(cfg: ModelConfig) -> ParamCounts:
    d, hd = cfg.d_model, cfg.head_dim
    per_layer = (cfg.n_heads + 2 * cfg.n_kv_heads) * hd * d + d * cfg.n_heads * hd + cfg.d_ff * d + d * cfg.d_ff // 2
    lm_head = 0.0 if cfg.tie_embeddings else float(cfg.vocab * d)
    return ParamCounts(float(cfg.n_layers * per_layer), float(cfg.vocab * d), lm_head, 4 * cfg.n_layers)


def _qwen(n_layers, d, inter, heads, kv, vocab, tied):
    return ModelConfig(n_layers=n_layers, d_model=d, d_ff=2 * inter, n_heads=heads, n_kv_heads=kv, vocab=vocab,
                       seq_len=512, rope_theta=1e6, tie_embeddings=tied)


# Qwen2.5 dimensions; d_ff is the concatenated gate|up width (2 x intermediate)
ARCHS = {
    "0.5B": _qwen(24, 896, 4864, 14, 2, 151936, True),
    "1.5B": _qwen(28, 1536, 8960, 12, 2, 151936, True),
    "3B": _qwen(36, 2048, 11008, 16, 2, 151936, True),
    "7B": _qwen(28, 3584, 18944, 28, 4, 152064, False),
    "14B": _qwen(48, 5120, 13824, 40, 8, 152064, False),
    "32B": _qwen(64, 5120, 27648, 40, 8, 152064, False),
}


def arch(name: str) -> ModelConfig:
    for k, v in ARCHS.items():
        if k.lower() == str(name).lower():
            return v
    raise KeyError(f"unknown model size {name!r}; available: {', '.join(ARCHS)}")


# --------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class PlannerConstants:
    """Memory-model constants not pinned down by the formulas.

    ``reserve_bytes`` covers runtime context and allocator slack;
    ``logit_chunk_tokens`` / ``attn_chunk_tokens`` are the chunk sizes when
    chunking is on; ``util_half_tokens`` is the micro-batch size (tokens) at
    which kernels reach half of their attainable throughput.
    """

    reserve_bytes: float = 1.75e9
    logit_chunk_tokens: int = 1024
    attn_chunk_tokens: int = 512
    util_half_tokens: float = 256.0
    logit_bytes: float = 6.0  # bf16 logits + f32 softmax/gradient per vocab entry
    fp8_overhead: float = 0.15  # extra per-token time in FP8 (quantize, transpose) relative to the linear time


CONSTANTS = PlannerConstants()

RECOMPUTE_LEVELS = (
    frozenset(),
    frozenset({Recompute.SWIGLU}),
    frozenset({Recompute.FFN, Recompute.ATTENTION}),
    frozenset({Recompute.QKV, Recompute.FFN}),
    frozenset({Recompute.BLOCK}),
)

MICRO_BATCHES = (1, 2, 4, 6, 8, 10, 12, 16, 20, 24, 32, 48, 64)


def _prec(p) -> PrecisionMap:
    return p if isinstance(p, PrecisionMap) else PrecisionMap.parse(str(p))


@dataclass(frozen=True)
class RunPlan:
    micro_batch: int = 1
    ga_steps: int = 1
    recompute: frozenset = frozenset()
    offload: frozenset = frozenset()
    shard_weights: bool = False
    shard_grads: bool = False
    precision: PrecisionMap = PrecisionMap(MatmulPrecision.FP8)
    moments: str = "bf16"
    seq_len: int = 512
    chunk_logits: bool = True
    chunk_attention: bool = True

    def __post_init__(self):
        object.__setattr__(self, "recompute", parse_recompute(self.recompute))
        object.__setattr__(self, "offload", parse_offload(self.offload))
        object.__setattr__(self, "precision", _prec(self.precision))
        if self.micro_batch < 1 or self.ga_steps < 1:
            raise ValueError("micro_batch and ga_steps must be >= 1")

    @property
    def tokens(self) -> int:
        return self.micro_batch * self.seq_len

    @property
    def fp8(self) -> bool:
        return self.precision.fp8

    def warnings(self) -> list:
        out = []
        if self.shard_grads and not self.shard_weights:
            out.append("sharded gradients without sharded weights: shard weights first, it costs less traffic")
        return out

    def sort_key(self) -> tuple:
        rc = sorted(r.value for r in self.recompute)
        return (len(self.offload), format_offload(self.offload), len(rc), rc, -self.micro_batch,
                self.shard_weights, self.shard_grads)

    def describe(self) -> str:
        rc = ",".join(sorted(r.value for r in self.recompute)) or "---"
        s = f"mb={self.micro_batch} ga={self.ga_steps} recompute={rc} offload={format_offload(self.offload)}"
        if self.shard_weights or self.shard_grads:
            s += f" shard_weights={self.shard_weights} shard_grads={self.shard_grads}"
        return s

    def to_dict(self) -> dict:
        return {
            "micro_batch": self.micro_batch,
            "ga_steps": self.ga_steps,
            "recompute": sorted(r.value for r in self.recompute),
            "offload": format_offload(self.offload),
            "shard_weights": self.shard_weights,
            "shard_grads": self.shard_grads,
            "precision": "fp8" if self.fp8 else self.precision.block_matmuls.value,
            "moments": self.moments,
            "seq_len": self.seq_len,
        }


# --------------------------------------------------------------------------
# memory

CATEGORIES = (
    "params_fp8",
    "params_bf16_master",
    "moments_m",
    "moments_v",
    "grads",
    "residuals",
    "activations",
    "logits_workspace",
    "attn_workspace",
    "reserve",
)


@dataclass
class MemoryBreakdown:
    device: dict
    host: dict
    W: int = 1

    @property
    def device_total(self) -> float:
        return sum(self.device.values())

    @property
    def host_total(self) -> float:
        return sum(self.host.values())

    def to_dict(self) -> dict:
        return {"W": self.W, "device": dict(self.device), "host": dict(self.host),
                "device_total": self.device_total, "host_total": self.host_total}


def _act_elems_per_token(cfg: ModelConfig, recompute) -> dict:
    """Saved elements per token per layer for each named tensor (bf16 unless noted)."""
    d = cfg.d_model
    full = {
        "n1": d,
        "qkv": cfg.qkv_dim,
        "att": d,
        "lse": cfg.n_heads * 2,  # f32 statistics, expressed in bf16 units
        "r_mid": d,
        "n2": d,
        "gu": cfg.d_ff,
        "a": cfg.d_ff // 2,
    }
    drops = {
        Recompute.SWIGLU: {"a"},
        Recompute.RMSNORM: {"n1", "n2"},
        Recompute.ATTENTION: {"att", "lse"},
        Recompute.FFN: {"n2", "gu", "a"},
        Recompute.QKV: {"qkv"},
        Recompute.BLOCK: set(full),
    }
    dropped = set()
    for r in recompute:
        dropped |= drops[r]
    return {k: v for k, v in full.items() if k not in dropped}


def memory_breakdown(cfg: ModelConfig, plan: RunPlan, W: int = 1, counts: ParamCounts | None = None,
                     constants: PlannerConstants = CONSTANTS, tokens_in_flight: float | None = None) -> MemoryBreakdown:
    """Per-worker device bytes and host bytes (host shared by all workers) per category.

    ``counts`` overrides the parameter counts derived from ``cfg`` (useful for
    round-number fixtures). ``tokens_in_flight`` overrides the token count used
    for the residual stream (default: one micro-batch).
    """
    pc = counts or param_counts(cfg)
    off = plan.offload
    fp8 = plan.fp8
    mom_b = 4 if plan.moments == "f32" else 2
    L = cfg.n_layers
    zero1 = W if W > 1 else 1
    layer_params = pc.block / L if L else 0.0
    scales = 4.0 * pc.n_block_tensors
    dev = dict.fromkeys(CATEGORIES, 0.0)
    host = dict.fromkeys(CATEGORIES, 0.0)

    def split(cat, full_dev, resident_if_off, offloaded, host_bytes=None):
        """Put ``full_dev`` on device, or ``resident_if_off`` on device and the rest on host."""
        if offloaded:
            dev[cat] += min(resident_if_off, full_dev)
            host[cat] += full_dev * W if host_bytes is None else host_bytes
        else:
            dev[cat] += full_dev

    # working weights of the blocks
    w_b = 1.0 if fp8 else 2.0
    block_w = pc.block * w_b + (scales if fp8 else 0.0)
    layer_w = block_w / L if L else 0.0
    if plan.shard_weights and W > 1:
        own = block_w / W
        dev_w = own + 2 * layer_w
        host_cache = block_w  # gathered weights cached on host once per step
    else:
        dev_w, host_cache = block_w, 0.0
    wcat = "params_fp8" if fp8 else "params_bf16_master"
    if Offload.PARAMS in off:
        dev[wcat] += min(2 * layer_w, dev_w)
        host[wcat] += block_w
    else:
        dev[wcat] += dev_w
        host[wcat] += host_cache
    # replicated embedding/LM-head weights, bf16 (master == working copy)
    dev["params_bf16_master"] += pc.replicated * 2
    # block master copies (FP8 only; optimizer state, sharded by ZeRO-1)
    if fp8:
        split("params_bf16_master", pc.block * 2 / zero1, 0.0, Offload.MASTER in off, pc.block * 2)
    # moments, sharded by ZeRO-1
    for cat, flag in (("moments_m", Offload.M), ("moments_v", Offload.V)):
        split(cat, pc.total * mom_b / zero1, 0.0, flag in off, pc.total * mom_b)
    # gradients: replicated parts always on device; block grads shardable/offloadable
    dev["grads"] += pc.replicated * 2
    g_block = pc.block * 2 / (W if plan.shard_grads and W > 1 else 1)
    g_block_dev = g_block + (2 * layer_params * 2 if plan.shard_grads and W > 1 else 0.0)
    if Offload.GRADS in off:
        dev["grads"] += min(2 * layer_params * 2, g_block_dev)
        host["grads"] += pc.block * 2
    else:
        dev["grads"] += g_block_dev
    # residual stream (kept in bf16 at every recompute level)
    tok = plan.tokens
    res_tok = tokens_in_flight if tokens_in_flight is not None else tok
    res_layer = tok * cfg.d_model * 2
    if Offload.X in off:
        dev["residuals"] += min(2 * res_layer, L * res_layer)
        host["residuals"] += L * res_tok * cfg.d_model * 2 * (W if tokens_in_flight is None else 1)
    else:
        dev["residuals"] += L * res_layer
    # saved activations plus one fully materialized layer (the one in backward)
    saved = sum(_act_elems_per_token(cfg, plan.recompute).values()) * 2
    # one fully materialized layer plus the gradients flowing through it
    grad_elems = cfg.d_ff + cfg.d_ff // 2 + cfg.qkv_dim + 3 * cfg.d_model
    working = (sum(_act_elems_per_token(cfg, frozenset()).values()) + grad_elems) * 2
    if fp8:
        # quantized copies and transposes of the matmul inputs of one layer
        working += 3 * cfg.d_model + cfg.d_ff // 2 + cfg.qkv_dim
        dev["activations"] += 2 * (cfg.d_ff * cfg.d_model)  # transposed FP8 weight buffers
    dev["activations"] += tok * (L * saved + working)
    # LM-head logits + their gradient (bf16), chunked or not
    lt = min(tok, constants.logit_chunk_tokens) if plan.chunk_logits else tok
    dev["logits_workspace"] += lt * cfg.vocab * constants.logit_bytes + tok * cfg.d_model * 2 * 2
    # deterministic attention backward keeps an f32 dQ accumulator per chunk
    at = min(tok, constants.attn_chunk_tokens) if plan.chunk_attention else tok
    dev["attn_workspace"] += at * cfg.n_heads * cfg.head_dim * 4
    dev["reserve"] += constants.reserve_bytes
    return MemoryBreakdown(dev, host, W)


def layer_sizes(cfg: ModelConfig, plan: RunPlan, W: int = 1, counts: ParamCounts | None = None,
                constants: PlannerConstants = CONSTANTS) -> LayerSizes:
    """Per-layer streamed sizes for the offload simulator, consistent with memory_breakdown.

    ``static_device`` is everything the simulator does not track per layer:
    the device total minus block weights, block gradients and residuals.
    """
    pc = counts or param_counts(cfg)
    mb = memory_breakdown(cfg, plan, W, pc, constants)
    L = cfg.n_layers
    lp = pc.block / L
    wcat = "params_fp8" if plan.fp8 else "params_bf16_master"
    block_w_dev = mb.device[wcat] - (0.0 if plan.fp8 else pc.replicated * 2)
    block_g_dev = mb.device["grads"] - pc.replicated * 2
    static = mb.device_total - block_w_dev - block_g_dev - mb.device["residuals"]
    w = lp * (1.0 if plan.fp8 else 2.0) + (4.0 * pc.n_block_tensors / L if plan.fp8 else 0.0)
    return LayerSizes(L, w, lp * 2, plan.tokens * cfg.d_model * 2, static_device=static)


# --------------------------------------------------------------------------
# FLOPs


@dataclass(frozen=True)
class FlopBreakdown:
    """Operations per token (forward + backward), by precision class."""

    fp8_linear: float
    bf16_linear: float
    bf16_lmhead: float
    bf16_attention: float
    other: float = 0.0

    def by_precision(self) -> dict:
        return {"fp8": self.fp8_linear,
                "bf16": self.bf16_linear + self.bf16_lmhead + self.bf16_attention + self.other}

    @property
    def total(self) -> float:
        return self.fp8_linear + self.bf16_linear + self.bf16_lmhead + self.bf16_attention + self.other

    def per_step(self, tokens: float) -> dict:
        return {k: v * tokens for k, v in asdict(self).items()}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


def flop_breakdown(cfg: ModelConfig, prec="fp8", seq_len: int | None = None,
                   counts: ParamCounts | None = None) -> FlopBreakdown:
    """6 x params for linear layers and the LM-head; attention 12 * seq * d per layer.

    The attention count covers QK^T and PV, 2 FLOPs per MAC, x3 for forward
    plus backward, over the full (non-causal) score matrix.
    """
    prec = _prec(prec)
    pc = counts or param_counts(cfg)
    seq = cfg.seq_len if seq_len is None else seq_len
    linear = 6.0 * pc.block
    lmhead = 6.0 * cfg.vocab * cfg.d_model
    attention = 12.0 * seq * cfg.d_model * cfg.n_layers
    if prec.fp8:
        return FlopBreakdown(linear, 0.0, lmhead, attention)
    return FlopBreakdown(0.0, linear, lmhead, attention)


def lower_bound_seconds_per_token(fb: FlopBreakdown, hw: HardwareProfile, attainable: bool = False) -> float:
    scale = hw.attainable_fraction if attainable else 1.0
    t = 0.0
    for precision, ops in fb.by_precision().items():
        if ops:
            t += ops / (hw.peak(precision) * scale)
    return t


def mfu(measured_tps: float, cfg: ModelConfig | FlopBreakdown, prec, hw: HardwareProfile,
        seq_len: int | None = None) -> float:
    """Lower-bound step time over measured step time, precision aware (datasheet peaks)."""
    if measured_tps <= 0:
        raise ValueError("measured_tps must be positive")
    fb = cfg if isinstance(cfg, FlopBreakdown) else flop_breakdown(cfg, prec, seq_len)
    return lower_bound_seconds_per_token(fb, hw) * measured_tps


def fp8_speedup_ceiling(cfg: ModelConfig | FlopBreakdown, hw: HardwareProfile, seq_len: int | None = None) -> float:
    """Best-case FP8 speed-up over BF16 with LM-head and attention pinned to BF16."""
    if isinstance(cfg, FlopBreakdown):
        fb8 = cfg
    else:
        fb8 = flop_breakdown(cfg, "fp8", seq_len)
    lin = fb8.fp8_linear + fb8.bf16_linear
    fb16 = replace(fb8, fp8_linear=0.0, bf16_linear=lin)
    fb8 = replace(fb8, fp8_linear=lin, bf16_linear=0.0)
    return lower_bound_seconds_per_token(fb16, hw) / lower_bound_seconds_per_token(fb8, hw) - 1.0


# --------------------------------------------------------------------------
# time


@dataclass(frozen=True)
class TimeBreakdown:
    compute: float
    transfer: float
    exposed_transfer: float
    optimizer: float
    total: float
    tokens: float

    @property
    def tps(self) -> float:
        return self.tokens / self.total if self.total > 0 and math.isfinite(self.total) else 0.0

    @property
    def exposed_fraction(self) -> float:
        return self.exposed_transfer / self.total if self.total > 0 and math.isfinite(self.total) else 1.0

    @property
    def time_infeasible(self) -> bool:
        return not math.isfinite(self.total)


def _recompute_fraction(cfg: ModelConfig, recompute) -> tuple:
    """(fraction of linear forward re-run, whether the attention core re-runs)."""
    if Recompute.BLOCK in recompute:
        return 1.0, True
    pc = param_counts(cfg)
    lp = pc.block / cfg.n_layers
    d = cfg.d_model
    frac = 0.0
    if Recompute.FFN in recompute:
        frac += cfg.d_ff * d / lp  # gate_up; down proj input comes from swiglu, output is not needed
    if Recompute.QKV in recompute:
        frac += cfg.qkv_dim * d / lp
    return frac, Recompute.ATTENTION in recompute


def estimate_step_time(cfg: ModelConfig, plan: RunPlan, hw: HardwareProfile, W: int = 1,
                       counts: ParamCounts | None = None, constants: PlannerConstants = CONSTANTS,
                       latency: float = DEFAULT_LATENCY) -> TimeBreakdown:
    """Per-layer pipeline model of one optimizer step.

    compute(layer) uses attainable peaks and a utilization that saturates with
    the micro-batch size; streamed tensors for layer l+1 move while layer l
    computes, so only ``max(0, transfer - compute)`` per layer is exposed,
    plus the un-overlapped first prefetch.
    """
    pc = counts or param_counts(cfg)
    fb = flop_breakdown(cfg, plan.precision, plan.seq_len, pc)
    tok = plan.tokens
    util = tok / (tok + constants.util_half_tokens)
    peak = {p: hw.peak(p) * hw.attainable_fraction * util for p in ("bf16", "fp8")}
    L = cfg.n_layers
    lin_key = "fp8" if plan.fp8 else "bf16"
    lin_ops = fb.fp8_linear + fb.bf16_linear
    rec_frac, rec_att = _recompute_fraction(cfg, plan.recompute)
    # forward is 1/3 of the 6*P count
    lin_time = lin_ops * tok * (1.0 + rec_frac / 3.0) / peak[lin_key]
    if plan.fp8:
        lin_time *= 1.0 + constants.fp8_overhead
    att_time = fb.bf16_attention * tok * (1.0 + (1.0 / 3.0 if rec_att else 0.0)) / peak["bf16"]
    head_time = fb.bf16_lmhead * tok / peak["bf16"]
    layer_compute_fwd = (lin_time + att_time) / L / 3.0
    layer_compute_bwd = (lin_time + att_time) / L * 2.0 / 3.0
    # transfers per layer
    lp = pc.block / L
    w_b = 1.0 if plan.fp8 else 2.0
    off = plan.offload
    fwd_bytes = bwd_bytes = 0.0
    if Offload.PARAMS in off:
        fwd_bytes += lp * w_b
        bwd_bytes += lp * w_b
    if Offload.X in off:
        fwd_bytes += tok * cfg.d_model * 2
        bwd_bytes += tok * cfg.d_model * 2
    if Offload.GRADS in off:
        bwd_bytes += lp * 2 * (2 if plan.ga_steps > 1 else 1)  # read-modify-write when accumulating
    if plan.shard_weights and W > 1:
        # other workers' shards come from the host cache in every pass
        fwd_bytes += lp * w_b * (W - 1) / W
        bwd_bytes += lp * w_b * (W - 1) / W
    if plan.shard_grads and W > 1:
        bwd_bytes += lp * 2 * (W - 1) / W * (1 if hw.p2p else 2)
    bw = hw.link_bandwidth * hw.double_buffer_efficiency

    def xfer(nbytes):
        if nbytes == 0:
            return 0.0
        return float("inf") if bw <= 0 else latency + nbytes / bw

    t_f, t_b = xfer(fwd_bytes), xfer(bwd_bytes)
    exposed_micro = L * (max(0.0, t_f - layer_compute_fwd) + max(0.0, t_b - layer_compute_bwd)) + t_f
    compute_micro = lin_time + att_time + head_time
    transfer_micro = L * (t_f + t_b)
    # optimizer: touches master, m, v once per step, streaming offloaded parts
    mom_b = 4 if plan.moments == "f32" else 2
    zero1 = W if W > 1 else 1
    opt_dev_bytes = pc.total / zero1 * (2 * mom_b + 2 + 2) * 2  # read + write
    opt_time = opt_dev_bytes / hw.mem_bandwidth
    opt_host = 0.0
    if Offload.M in off:
        opt_host += pc.total / zero1 * mom_b * 2
    if Offload.V in off:
        opt_host += pc.total / zero1 * mom_b * 2
    if Offload.MASTER in off and plan.fp8:
        opt_host += pc.block / zero1 * 2 * 2
    if opt_host:
        opt_time = max(opt_time, xfer(opt_host))
    if W > 1:
        # ZeRO-1 weight re-broadcast and one gradient reduce-scatter per step
        comm = pc.total * (w_b + 2) * (W - 1) / W * (1 if hw.p2p else 2)
        opt_time += xfer(comm)
    ga = plan.ga_steps
    total = ga * (compute_micro + exposed_micro) + opt_time
    return TimeBreakdown(ga * compute_micro, ga * transfer_micro, ga * exposed_micro, opt_time, total,
                         float(ga * tok))


# --------------------------------------------------------------------------
# search


@dataclass
class SearchResult:
    plans: list  # (tps, RunPlan, MemoryBreakdown) sorted best first
    explored: int
    binding_constraint: str = ""

    @property
    def best(self):
        return self.plans[0][1] if self.plans else None

    def to_dict(self, top: int | None = None) -> dict:
        rows = self.plans if top is None else self.plans[:top]
        return {
            "explored": self.explored,
            "feasible": len(self.plans),
            "binding_constraint": self.binding_constraint,
            "plans": [dict(p.to_dict(), tps=tps, device_bytes=m.device_total, host_bytes=m.host_total)
                      for tps, p, m in rows],
        }


def _offload_universe(fp8: bool) -> list:
    items = [Offload.X, Offload.M, Offload.V, Offload.GRADS, Offload.PARAMS]
    if fp8:
        items.append(Offload.MASTER)
    return items


def _all_subsets(items) -> list:
    out = []
    for r in range(len(items) + 1):
        out.extend(frozenset(c) for c in itertools.combinations(items, r))
    return out


def plan_feasible(cfg, plan, hw, W=1, counts=None, constants=CONSTANTS) -> tuple:
    mb = memory_breakdown(cfg, plan, W, counts, constants)
    ok = mb.device_total <= hw.device_bytes and mb.host_total <= hw.host_bytes
    return ok, mb


def search_plan(cfg: ModelConfig, hw: HardwareProfile, W: int = 1, target_batch_tokens: int = 500_000,
                precision="fp8", moments: str = "bf16", exhaustive: bool = False,
                micro_batches=MICRO_BATCHES, recompute_levels=RECOMPUTE_LEVELS, seq_len: int = 512,
                counts: ParamCounts | None = None, constants: PlannerConstants = CONSTANTS) -> SearchResult:
    """Enumerate (micro-batch, recompute, offload, sharding) and rank feasible plans by TPS.

    The default search skips plans that are provably dominated: memory only
    grows with the micro-batch, so once a (recompute, offload, sharding)
    combination is infeasible at some micro-batch, larger ones are skipped;
    and offloading more only adds transfers, so supersets of a feasible
    offload set are skipped. Ties rank smaller offload sets first, which keeps
    the top plan identical to the exhaustive search.
    """
    prec = _prec(precision)
    subsets = _all_subsets(_offload_universe(prec.fp8))
    shard_opts = [(False, False)] if W == 1 else [(False, False), (True, False), (True, True), (False, True)]
    results = []
    explored = 0
    best_device = None
    for sw, sg in shard_opts:
        for rc in recompute_levels:
            feasible_sets: list = []
            infeasible_at: dict = {}
            for mbs in sorted(micro_batches):
                ga = max(1, math.ceil(target_batch_tokens / (mbs * seq_len)))
                for off in subsets:
                    if not exhaustive:
                        if off in infeasible_at:
                            continue
                        if any(f < off for f, m in feasible_sets if m == mbs):
                            continue
                    plan = RunPlan(mbs, ga, rc, off, sw, sg, prec, moments, seq_len)
                    explored += 1
                    ok, mem = plan_feasible(cfg, plan, hw, W, counts, constants)
                    if best_device is None or mem.device_total < best_device[0]:
                        best_device = (mem.device_total, mem.host_total)
                    if not ok:
                        infeasible_at[off] = mbs
                        continue
                    feasible_sets.append((off, mbs))
                    t = estimate_step_time(cfg, plan, hw, W, counts, constants)
                    results.append((t.tps, plan, mem))
    results.sort(key=lambda r: (-round(r[0], 6), r[1].sort_key()))
    binding = ""
    if not results and best_device is not None:
        if best_device[0] > hw.device_bytes:
            binding = (f"device memory: smallest plan needs {best_device[0] / GB:.1f} GB "
                       f"of {hw.device_bytes / GB:.1f} GB")
        else:
            binding = f"host memory: needs {best_device[1] / GB:.1f} GB of {hw.host_bytes / GB:.1f} GB"
    return SearchResult(results, explored, binding)


def max_micro_batch(cfg: ModelConfig, plan: RunPlan, hw: HardwareProfile, W: int = 1, limit: int = 256,
                    counts: ParamCounts | None = None, constants: PlannerConstants = CONSTANTS) -> int:
    """Largest micro-batch (in sequences) for which ``plan`` fits; 0 if none."""
    best = 0
    for mbs in range(1, limit + 1):
        ok, _ = plan_feasible(cfg, replace(plan, micro_batch=mbs), hw, W, counts, constants)
        if not ok:
            break
        best = mbs
    return best
