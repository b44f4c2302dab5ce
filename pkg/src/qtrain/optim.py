"""AdamW with BF16 master weights, f32 or BF16 moments, and ZeRO-1 sharding.

The update is elementwise and computed in f32 from the decoded state. Every
write into a BF16 field is stochastically rounded with a key that depends
only on (seed, parameter, field, step, global element index). An update of a
slice is therefore bitwise identical to the same elements of a full update,
which is what makes sharded stepping exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import NonFiniteError, RngKey, round_bf16, stochastic_round_bf16, stream_id
from .tensorops import seq_sum

__all__ = [
    "AdamWConfig",
    "OptimState",
    "init_state",
    "adamw_step",
    "NORM_BLOCK",
    "grad_sq_partials",
    "global_grad_norm",
    "sharded_grad_norm",
    "clip_factor",
    "clip_grads",
    "ShardSpec",
    "shard_spec",
    "shard_state",
    "sharded_step",
]

NORM_BLOCK = 256


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class OptimState:
    """``master``, ``m`` and ``v`` map parameter names to flat f32 arrays.

    BF16 fields hold bf16-representable values. ``offsets`` maps names to the
    global element index of the first entry (non-zero for shards).
    """

    master: dict
    m: dict
    v: dict
    step_count: int = 0
    hyper: AdamWConfig = field(default_factory=AdamWConfig)
    moments: str = "f32"  # "f32" or "bf16"
    master_dtype: str = "bf16"  # "bf16" or "f32" (debug)
    seed: int = 0
    shapes: dict = field(default_factory=dict)
    offsets: dict = field(default_factory=dict)
    lengths: dict = field(default_factory=dict)  # true (unpadded) length per parameter

    @property
    def moment_bytes_per_param(self) -> int:
        return 8 if self.moments == "f32" else 4

    @property
    def master_bytes_per_param(self) -> int:
        return 2 if self.master_dtype == "bf16" else 4

    def nbytes(self) -> int:
        """Storage of the optimizer state (moments + master) in the chosen dtypes."""
        n = sum(a.size for a in self.master.values())
        return n * (self.moment_bytes_per_param + self.master_bytes_per_param)

    def params(self) -> dict:
        """Master weights reshaped to their parameter shapes (unsharded states only)."""
        return {k: self.master[k][: self.lengths[k]].reshape(self.shapes[k]).copy() for k in self.master}


def init_state(params: dict, hyper: AdamWConfig = AdamWConfig(), moments: str = "f32",
               master_dtype: str = "bf16", seed: int = 0) -> OptimState:
    if moments not in ("f32", "bf16") or master_dtype not in ("f32", "bf16"):
        raise ValueError("moments and master_dtype must be 'f32' or 'bf16'")
    master, m, v = {}, {}, {}
    for k, p in params.items():
        flat = np.asarray(p, dtype=np.float32).ravel().copy()
        master[k] = round_bf16(flat) if master_dtype == "bf16" else flat
        m[k] = np.zeros_like(flat)
        v[k] = np.zeros_like(flat)
    return OptimState(master, m, v, 0, hyper, moments, master_dtype, seed,
                      shapes={k: np.shape(p) for k, p in params.items()},
                      offsets={k: 0 for k in params},
                      lengths={k: int(np.size(v)) for k, v in params.items()})


def _store(x: np.ndarray, bf16: bool, seed: int, name: str, fld: str, step: int, total_len: int,
           offset: int) -> np.ndarray:
    if not bf16:
        return x
    key = RngKey(seed, stream_id("adamw", name, fld), step * total_len + offset)
    return stochastic_round_bf16(x, key)


def _update(state: OptimState, name: str, g: np.ndarray, step: int, total_len: int) -> None:
    h = state.hyper
    f32 = np.float32
    g = np.asarray(g, dtype=np.float32).ravel()
    if not np.all(np.isfinite(g)):
        raise NonFiniteError(f"non-finite gradient for {name}")
    p, m, v = state.master[name], state.m[name], state.v[name]
    if g.shape != p.shape:
        raise ValueError(f"gradient for {name} has {g.size} elements, state has {p.size}")
    b1, b2 = f32(h.beta1), f32(h.beta2)
    m_new = b1 * m + (f32(1) - b1) * g
    v_new = b2 * v + (f32(1) - b2) * (g * g)
    bc1 = f32(1) - f32(h.beta1 ** step)
    bc2 = f32(1) - f32(h.beta2 ** step)
    upd = (m_new / bc1) / (np.sqrt(v_new / bc2) + f32(h.eps))
    p_new = p - f32(h.lr) * (upd + f32(h.weight_decay) * p)
    off = state.offsets[name]
    bf16_m = state.moments == "bf16"
    state.m[name] = _store(m_new, bf16_m, state.seed, name, "m", step, total_len, off)
    state.v[name] = _store(v_new, bf16_m, state.seed, name, "v", step, total_len, off)
    state.master[name] = _store(p_new, state.master_dtype == "bf16", state.seed, name, "master", step,
                                total_len, off)


def adamw_step(state: OptimState, grads: dict, key: RngKey | None = None) -> dict:
    """One AdamW step in place; returns the new parameters.

    ``key`` (optional) overrides the seed used for stochastic rounding.
    """
    if key is not None:
        state.seed = key.seed
    state.step_count += 1
    for name in state.master:
        _update(state, name, grads[name], state.step_count, state.lengths[name])
    return state.params()


# --------------------------------------------------------------------------
# gradient norm


def grad_sq_partials(flat: np.ndarray, block: int = NORM_BLOCK) -> np.ndarray:
    """Per-block sums of squares, each summed in ascending order (f64).

    Trailing zero padding only appends exact zeros, so partials of a padded
    vector match those of the unpadded one.
    """
    flat = np.asarray(flat, dtype=np.float64).ravel()
    pad = (-flat.size) % block
    if pad:
        flat = np.concatenate([flat, np.zeros(pad)])
    if flat.size == 0:
        return np.zeros(0)
    return seq_sum((flat * flat).reshape(-1, block), axis=1)


def _norm_from_partials(per_tensor: list) -> np.float32:
    totals = [seq_sum(p) if p.size else 0.0 for p in per_tensor]
    return np.float32(np.sqrt(seq_sum(np.asarray(totals, dtype=np.float64)) if totals else 0.0))


def global_grad_norm(grads: dict, block: int = NORM_BLOCK) -> np.float32:
    """L2 norm over all gradients; tensors in name-insertion order, blocks ascending."""
    return _norm_from_partials([grad_sq_partials(g, block) for g in grads.values()])


def sharded_grad_norm(shards: list, block: int = NORM_BLOCK) -> list:
    """Global norm when worker ``w`` holds ``shards[w][name]`` (block-aligned slices).

    Workers exchange their per-block partials; everyone reduces the
    concatenation in the same order and gets the unsharded value.
    """
    names = list(shards[0])
    per_tensor = []
    for name in names:
        parts = [grad_sq_partials(s[name], block) for s in shards]
        per_tensor.append(np.concatenate(parts))
    # padding blocks contribute exact zeros, which leave a running sum unchanged
    norm = _norm_from_partials(per_tensor)
    return [norm for _ in shards]


def clip_factor(norm, max_norm: float | None) -> np.float32:
    if max_norm is None:
        return np.float32(1.0)
    return np.float32(min(1.0, float(max_norm) / (float(norm) + 1e-6)))


def clip_grads(grads: dict, max_norm: float | None) -> tuple:
    """Scale gradients so their global norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = global_grad_norm(grads)
    c = clip_factor(norm, max_norm)
    if c == 1:
        return grads, norm
    return {k: np.asarray(g, dtype=np.float32) * c for k, g in grads.items()}, norm


# --------------------------------------------------------------------------
# ZeRO-1


@dataclass(frozen=True)
class ShardSpec:
    W: int
    padded: dict  # name -> padded length (multiple of W * block)
    block: int = NORM_BLOCK

    def bounds(self, name: str, worker: int) -> tuple:
        n = self.padded[name] // self.W
        return worker * n, (worker + 1) * n


def shard_spec(shapes: dict, W: int, block: int = NORM_BLOCK) -> ShardSpec:
    unit = W * block
    return ShardSpec(W, {k: -(-int(np.prod(s)) // unit) * unit if np.prod(s) else unit
                         for k, s in shapes.items()}, block)


def _pad(flat: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=np.float32)
    out[: flat.size] = flat
    return out


def shard_state(state: OptimState, W: int) -> list:
    """Split a full state into W worker-owned contiguous slices."""
    spec = shard_spec(state.shapes, W)
    out = []
    for w in range(W):
        master, m, v, offsets = {}, {}, {}, {}
        for k in state.master:
            lo, hi = spec.bounds(k, w)
            master[k] = _pad(state.master[k], spec.padded[k])[lo:hi].copy()
            m[k] = _pad(state.m[k], spec.padded[k])[lo:hi].copy()
            v[k] = _pad(state.v[k], spec.padded[k])[lo:hi].copy()
            offsets[k] = lo
        out.append(replace(state, master=master, m=m, v=v, offsets=offsets, shapes=dict(state.shapes),
                           lengths=dict(state.lengths)))
    return out


def sharded_step(group, states: list, grads) -> list:
    """ZeRO-1 step: each worker updates its slice, then weights are all-gathered.

    ``grads`` is either one full (replicated) gradient dict or a list of
    per-worker dicts holding each worker's reduced shard. Returns the full
    parameter dict per worker.
    """
    from .comms import all_gather_copy

    W = group.W
    if len(states) != W:
        raise ValueError(f"{len(states)} optimizer shards for {W} workers")
    spec = shard_spec(states[0].shapes, W)
    for w, st in enumerate(states):
        for k in st.master:
            lo, hi = spec.bounds(k, w)
            if st.offsets[k] != lo or st.master[k].size != hi - lo:
                raise ValueError(f"shard misalignment for {k} on worker {w}")
    if isinstance(grads, dict):
        local = []
        for w in range(W):
            d = {}
            for k in states[w].master:
                lo, hi = spec.bounds(k, w)
                d[k] = _pad(np.asarray(grads[k], dtype=np.float32).ravel(), spec.padded[k])[lo:hi]
            local.append(d)
    else:
        local = list(grads)
    for w, st in enumerate(states):
        st.step_count += 1
        for k in st.master:
            _update(st, k, local[w][k], st.step_count, st.lengths[k])
    params = [dict() for _ in range(W)]
    for k in states[0].master:
        gathered = all_gather_copy(group, [st.master[k] for st in states])
        n, shape = states[0].lengths[k], states[0].shapes[k]
        for w in range(W):
            params[w][k] = gathered[w][:n].reshape(shape)
    return params
